"""Hole pre-filling, prompt construction, and pluggable inpainting backends.

Small holes (coverable by a 5x5 morphological closing of the context
region) are filled locally with fast-marching inpainting; everything
larger is delegated to an inpainting backend. Two backends ship:

* ``MockInpaintBackend`` fills each masked pixel with the color of its
  nearest unmasked pixel (ties broken row-major). It is bit-deterministic,
  which lets the whole pipeline run offline.
* ``HttpInpaintBackend`` speaks a neutral JSON-over-HTTP contract::

      POST <endpoint>
      {"image": <base64 PNG RGB>, "mask": <base64 PNG gray, 255=inpaint>,
       "prompt": <str>, "seed": <int|null>}
      -> 200 {"image": <base64 PNG RGB>}

  Thin adapters (``DalleStyleBackend``, ``SdServerBackend``) map the same
  request onto provider-flavored endpoints, letterboxing to the provider's
  square resolution and inverting it on return.

Responses can be cached on disk keyed by the full request content so paid
API calls never repeat across reruns.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .geometry import PartialView
from .io import decode_png_rgb, encode_png_gray, encode_png_rgb

logger = logging.getLogger(__name__)

MAX_PROMPT_LENGTH = 400
FALLBACK_PROMPT = "a photo of household objects on a table"
SMALL_HOLE_KERNEL = 5


class InpaintBackendError(Exception):
    """Backend failure (HTTP error, timeout, malformed response)."""


@dataclass(frozen=True)
class Prompt:
    """Text prompt for the inpainting backend, truncated to the wire limit."""

    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("prompt must be non-empty")
        if len(self.text) > MAX_PROMPT_LENGTH:
            logger.warning(
                "prompt truncated from %d to %d characters", len(self.text), MAX_PROMPT_LENGTH
            )
            object.__setattr__(self, "text", self.text[:MAX_PROMPT_LENGTH])


@dataclass(frozen=True)
class InpaintRequest:
    """One inpainting call: image, binary mask (True = fill), prompt, seed."""

    image: np.ndarray
    mask: np.ndarray
    prompt: Prompt
    seed: int | None = None

    def __post_init__(self):
        image = np.ascontiguousarray(self.image, dtype=np.uint8)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if image.shape[:2] != mask.shape or image.ndim != 3 or image.shape[2] != 3:
            raise ValueError("image and mask dimensions must match")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)


def fill_small_holes(view: PartialView, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pre-fill holes small enough to vanish under a 5x5 closing.

    The context region (mask complement) is morphologically closed with a
    5x5 kernel; masked pixels covered by the closing are filled by
    fast-marching inpainting and dropped from the mask. What remains is
    returned for the diffusion backend.

    Returns:
        (image, remaining_mask): color image with small holes filled, and
        the still-to-inpaint mask.
    """
    mask = np.asarray(mask, dtype=bool)
    image = view.rgb.copy()
    if not np.any(mask):
        return image, mask.copy()

    kernel = np.ones((SMALL_HOLE_KERNEL, SMALL_HOLE_KERNEL), np.uint8)
    context = (~mask).astype(np.uint8)
    closed = cv2.morphologyEx(context, cv2.MORPH_CLOSE, kernel) > 0
    small = closed & mask
    if np.any(small):
        # All masked pixels are marked unknown during the fill so large
        # undefined regions cannot bleed into the small holes.
        filled = cv2.inpaint(
            image, mask.astype(np.uint8), SMALL_HOLE_KERNEL, cv2.INPAINT_TELEA
        )
        image[small] = filled[small]
    return image, mask & ~small


def make_prompt(frame_rgb: np.ndarray, captioner=None) -> Prompt:
    """Caption the input image and prefix it, or fall back to a fixed prompt.

    `captioner` is any object with ``caption(rgb) -> str``; on absence,
    failure, or an empty caption the fallback prompt is used.
    """
    if captioner is None:
        return Prompt(FALLBACK_PROMPT)
    try:
        caption = captioner.caption(frame_rgb)
    except Exception as exc:
        logger.warning("captioner failed (%s); using fallback prompt", exc)
        return Prompt(FALLBACK_PROMPT)
    if not caption or not caption.strip():
        return Prompt(FALLBACK_PROMPT)
    return Prompt("A photo of " + caption.strip())


def inpaint(
    request: InpaintRequest,
    backend,
    attempts: int = 3,
    backoff_base: float = 0.5,
    view_id=None,
) -> np.ndarray:
    """Run a backend and composite its output through the request mask.

    Unmasked pixels of the result always equal the input exactly,
    regardless of what the backend returned. Backend errors are retried
    with exponential backoff; after `attempts` failures an
    InpaintBackendError is raised.
    """
    last_error = None
    output = None
    for attempt in range(attempts):
        try:
            output = backend.inpaint(request)
            break
        except InpaintBackendError as exc:
            last_error = exc
            if attempt + 1 < attempts:
                delay = backoff_base * 2**attempt
                logger.warning(
                    "inpaint attempt %d/%d failed (%s); retrying in %.1fs",
                    attempt + 1,
                    attempts,
                    exc,
                    delay,
                )
                time.sleep(delay)
    if output is None:
        raise InpaintBackendError(
            f"inpaint backend failed for viewpoint {view_id}: {last_error}"
        )

    output = np.asarray(output, dtype=np.uint8)
    if output.shape != request.image.shape:
        raise InpaintBackendError(
            f"backend shape mismatch: got {output.shape}, expected {request.image.shape}"
        )
    return np.where(request.mask[..., None], output, request.image)


class MockInpaintBackend:
    """Deterministic offline backend: nearest-valid-pixel color fill.

    Each masked pixel takes the color of its nearest (Euclidean pixel
    distance) unmasked pixel; exact ties break toward the smaller
    row-major pixel index. Identical requests give identical bytes.
    """

    backend_id = "mock"

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        with self._lock:
            self.calls += 1
        image = request.image.copy()
        mask = request.mask
        if not np.any(mask):
            return image
        valid_rc = np.argwhere(~mask)
        if len(valid_rc) == 0:
            image[mask] = 128
            return image

        masked_rc = np.argwhere(mask)
        tree = cKDTree(valid_rc)
        dist, nearest = tree.query(masked_rc, k=1)
        # Resolve exact ties row-major; squared pixel distances are integers
        # so candidate filtering below is exact.
        candidates = tree.query_ball_point(masked_rc, dist + 1e-6)
        h, w = mask.shape
        for row, (rc, cand) in enumerate(zip(masked_rc, candidates)):
            if len(cand) > 1:
                d2 = np.sum((valid_rc[cand] - rc) ** 2, axis=1)
                best = min(
                    (valid_rc[c][0] * w + valid_rc[c][1], c)
                    for c, dd in zip(cand, d2)
                    if dd == d2.min()
                )[1]
                nearest[row] = best
        image[mask] = request.image[tuple(valid_rc[nearest].T)]
        return image


class TokenBucket:
    """Blocking token-bucket rate limiter shared across worker threads."""

    def __init__(self, rate_per_sec: float, capacity: int):
        self.rate = float(rate_per_sec)
        self.capacity = float(capacity)
        self._tokens = float(capacity)
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


def _mask_to_wire(mask: np.ndarray) -> np.ndarray:
    """Wire semantics: 255 = inpaint, 0 = keep."""
    return np.where(mask, 255, 0).astype(np.uint8)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class HttpInpaintBackend:
    """Client for the neutral JSON-over-HTTP inpainting contract."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        rate_limiter: TokenBucket | None = None,
        session=None,
    ):
        import requests

        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.rate_limiter = rate_limiter
        self.session = session or requests.Session()
        self.backend_id = f"http:{endpoint}"
        self.calls = 0
        self._lock = threading.Lock()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, payload: dict) -> dict:
        import requests

        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        with self._lock:
            self.calls += 1
        try:
            response = self.session.post(
                self.endpoint, json=payload, headers=self._headers(), timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise InpaintBackendError(f"request failed: {exc}") from exc
        if response.status_code != 200:
            raise InpaintBackendError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as exc:
            raise InpaintBackendError("response is not JSON") from exc

    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        payload = {
            "image": _b64(encode_png_rgb(request.image)),
            "mask": _b64(encode_png_gray(_mask_to_wire(request.mask))),
            "prompt": request.prompt.text,
            "seed": request.seed,
        }
        body = self._post(payload)
        if "image" not in body:
            raise InpaintBackendError("response lacks 'image' field")
        try:
            return decode_png_rgb(base64.b64decode(body["image"]))
        except ValueError as exc:
            raise InpaintBackendError(f"bad response image: {exc}") from exc


@dataclass(frozen=True)
class Letterbox:
    """Aspect-preserving resize onto a square canvas, and its inverse."""

    scale: float
    pad_x: int
    pad_y: int
    width: int
    height: int
    size: int

    @staticmethod
    def fit(height: int, width: int, size: int) -> "Letterbox":
        scale = size / max(height, width)
        new_w = max(1, int(round(width * scale)))
        new_h = max(1, int(round(height * scale)))
        return Letterbox(
            scale=scale,
            pad_x=(size - new_w) // 2,
            pad_y=(size - new_h) // 2,
            width=width,
            height=height,
            size=size,
        )

    def apply(self, image: np.ndarray, nearest: bool = False) -> np.ndarray:
        new_w = max(1, int(round(self.width * self.scale)))
        new_h = max(1, int(round(self.height * self.scale)))
        interp = cv2.INTER_NEAREST if nearest else cv2.INTER_AREA
        resized = cv2.resize(image, (new_w, new_h), interpolation=interp)
        shape = (self.size, self.size) + image.shape[2:]
        canvas = np.zeros(shape, dtype=image.dtype)
        canvas[self.pad_y : self.pad_y + new_h, self.pad_x : self.pad_x + new_w] = resized
        return canvas

    def invert(self, image: np.ndarray) -> np.ndarray:
        new_w = max(1, int(round(self.width * self.scale)))
        new_h = max(1, int(round(self.height * self.scale)))
        crop = image[self.pad_y : self.pad_y + new_h, self.pad_x : self.pad_x + new_w]
        return cv2.resize(crop, (self.width, self.height), interpolation=cv2.INTER_LINEAR)


class DalleStyleBackend(HttpInpaintBackend):
    """Adapter for DALL-E-style edit endpoints.

    The mask rides in the alpha channel of an RGBA image (alpha 0 =
    inpaint) and images are letterboxed to a fixed square.
    """

    def __init__(self, endpoint: str, api_key: str | None = None, size: int = 1024, **kwargs):
        super().__init__(endpoint, api_key=api_key, **kwargs)
        self.size = size
        self.backend_id = f"dalle:{endpoint}:{size}"

    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        box = Letterbox.fit(*request.mask.shape, self.size)
        image = box.apply(request.image)
        wire_mask = box.apply(_mask_to_wire(request.mask), nearest=True)
        rgba = np.dstack([image, 255 - wire_mask])
        ok, buf = cv2.imencode(".png", cv2.cvtColor(rgba, cv2.COLOR_RGBA2BGRA))
        if not ok:
            raise InpaintBackendError("mask PNG encoding failed")
        payload = {
            "image": _b64(encode_png_rgb(image)),
            "mask": _b64(buf.tobytes()),
            "prompt": request.prompt.text,
            "n": 1,
            "size": f"{self.size}x{self.size}",
        }
        body = self._post(payload)
        try:
            b64_image = body["data"][0]["b64_json"]
        except (KeyError, IndexError, TypeError) as exc:
            raise InpaintBackendError("malformed provider response") from exc
        square = decode_png_rgb(base64.b64decode(b64_image))
        if square.shape[:2] != (self.size, self.size):
            raise InpaintBackendError("backend shape mismatch from provider")
        return box.invert(square)


class SdServerBackend(HttpInpaintBackend):
    """Adapter for diffusion-webui-style img2img inpainting servers."""

    def __init__(self, endpoint: str, api_key: str | None = None, size: int = 512, **kwargs):
        super().__init__(endpoint, api_key=api_key, **kwargs)
        self.size = size
        self.backend_id = f"sd:{endpoint}:{size}"

    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        box = Letterbox.fit(*request.mask.shape, self.size)
        payload = {
            "init_images": [_b64(encode_png_rgb(box.apply(request.image)))],
            "mask": _b64(encode_png_gray(box.apply(_mask_to_wire(request.mask), nearest=True))),
            "prompt": request.prompt.text,
            "seed": -1 if request.seed is None else request.seed,
            "width": self.size,
            "height": self.size,
            "inpainting_fill": 1,
        }
        body = self._post(payload)
        try:
            b64_image = body["images"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise InpaintBackendError("malformed provider response") from exc
        square = decode_png_rgb(base64.b64decode(b64_image))
        if square.shape[:2] != (self.size, self.size):
            raise InpaintBackendError("backend shape mismatch from provider")
        return box.invert(square)


class CachingBackend:
    """Disk cache in front of any backend, keyed by full request content.

    Layout: <root>/<first-2-hex>/<sha256>.png. Cache access is serialized;
    a hit never touches the wrapped backend.
    """

    def __init__(self, inner, root):
        self.inner = inner
        self.root = Path(root)
        self.backend_id = inner.backend_id
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _key(self, request: InpaintRequest) -> str:
        digest = hashlib.sha256()
        digest.update(encode_png_rgb(request.image))
        digest.update(encode_png_gray(_mask_to_wire(request.mask)))
        digest.update(request.prompt.text.encode("utf-8"))
        digest.update(json.dumps(request.seed).encode("ascii"))
        digest.update(self.backend_id.encode("utf-8"))
        return digest.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.png"

    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        key = self._key(request)
        path = self._path(key)
        with self._lock:
            if path.exists():
                self.hits += 1
                return decode_png_rgb(path.read_bytes())
        result = self.inner.inpaint(request)
        with self._lock:
            self.misses += 1
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(encode_png_rgb(result))
        return result
