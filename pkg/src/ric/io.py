"""File formats: binary PLY point clouds, PNG images, intrinsics JSON.

Depth is stored on disk as 16-bit single-channel PNG where
pixel_value * depth_scale = meters (depth_scale defaults to 0.001, i.e.
millimeters). In memory depth is always meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .geometry import CameraIntrinsics, ColoredPointCloud, RgbdFrame

DEFAULT_DEPTH_SCALE = 0.001

_PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
    ]
)


class InputError(Exception):
    """Unreadable or inconsistent input files."""


@dataclass(frozen=True)
class SceneInput:
    """Paths making up one input frame on disk."""

    rgb_path: Path
    depth_path: Path
    intrinsics_path: Path

    def load(self) -> RgbdFrame:
        intrinsics, depth_scale = read_intrinsics(self.intrinsics_path)
        rgb = read_rgb_png(self.rgb_path)
        depth = read_depth_png(self.depth_path, depth_scale)
        if rgb.shape[:2] != intrinsics.shape or depth.shape != intrinsics.shape:
            raise InputError(
                f"image dimensions {rgb.shape[:2]} / {depth.shape} do not match "
                f"intrinsics {intrinsics.shape}"
            )
        return RgbdFrame(rgb=rgb, depth=depth, intrinsics=intrinsics)


def write_ply(path, cloud: ColoredPointCloud) -> None:
    """Write a binary little-endian PLY with float32 xyz and uint8 rgb."""
    records = np.empty(len(cloud), dtype=_PLY_DTYPE)
    records["x"] = cloud.points[:, 0].astype(np.float32)
    records["y"] = cloud.points[:, 1].astype(np.float32)
    records["z"] = cloud.points[:, 2].astype(np.float32)
    records["red"] = cloud.colors[:, 0]
    records["green"] = cloud.colors[:, 1]
    records["blue"] = cloud.colors[:, 2]
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        records.tofile(f)


_PLY_TYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "short": "<i2",
    "ushort": "<u2",
    "int": "<i4",
    "uint": "<u4",
}


def read_ply(path) -> ColoredPointCloud:
    """Read vertex positions and colors from an ascii or binary-LE PLY."""
    try:
        with open(path, "rb") as f:
            magic = f.readline().strip()
            if magic != b"ply":
                raise InputError(f"{path}: not a PLY file")
            fmt = None
            count = None
            props: list[tuple[str, str]] = []
            in_vertex = False
            while True:
                line = f.readline()
                if not line:
                    raise InputError(f"{path}: truncated PLY header")
                tokens = line.decode("ascii", "replace").strip().split()
                if not tokens or tokens[0] == "comment":
                    continue
                if tokens[0] == "format":
                    fmt = tokens[1]
                elif tokens[0] == "element":
                    in_vertex = tokens[1] == "vertex"
                    if in_vertex:
                        count = int(tokens[2])
                elif tokens[0] == "property" and in_vertex:
                    if tokens[1] == "list":
                        raise InputError(f"{path}: list properties unsupported")
                    props.append((tokens[2], tokens[1]))
                elif tokens[0] == "end_header":
                    break
            if count is None:
                raise InputError(f"{path}: no vertex element")
            names = [name for name, _ in props]
            if not {"x", "y", "z"} <= set(names):
                raise InputError(f"{path}: vertex element lacks x/y/z")
            if fmt == "binary_little_endian":
                dtype = np.dtype([(n, _PLY_TYPES[t]) for n, t in props])
                data = np.fromfile(f, dtype=dtype, count=count)
            elif fmt == "ascii":
                rows = np.loadtxt(f, max_rows=count, ndmin=2)
                data = {n: rows[:, i] for i, n in enumerate(names)}
            else:
                raise InputError(f"{path}: unsupported PLY format {fmt}")
            if len(data["x"]) != count:
                raise InputError(f"{path}: truncated vertex data")
            points = np.stack(
                [np.asarray(data["x"]), np.asarray(data["y"]), np.asarray(data["z"])],
                axis=1,
            ).astype(np.float64)
            if {"red", "green", "blue"} <= set(names):
                colors = np.stack(
                    [data["red"], data["green"], data["blue"]], axis=1
                ).astype(np.uint8)
            else:
                colors = np.full((count, 3), 255, dtype=np.uint8)
            return ColoredPointCloud(points, colors)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: failed to read PLY ({exc})") from exc


def read_rgb_png(path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise InputError(f"{path}: unreadable color image")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    cv2.imwrite(str(path), cv2.cvtColor(np.asarray(rgb, dtype=np.uint8), cv2.COLOR_RGB2BGR))


def read_depth_png(path, depth_scale: float = DEFAULT_DEPTH_SCALE) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"{path}: unreadable depth image")
    if raw.ndim != 2:
        raise InputError(f"{path}: depth image must be single channel")
    return raw.astype(np.float64) * depth_scale


def write_depth_png(path, depth_m: np.ndarray, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    values = np.rint(np.asarray(depth_m, dtype=np.float64) / depth_scale)
    cv2.imwrite(str(path), np.clip(values, 0, 65535).astype(np.uint16))


def write_mask_png(path, mask: np.ndarray) -> None:
    """Debug dump of a binary mask as 0/255 grayscale."""
    cv2.imwrite(str(path), np.where(mask, 255, 0).astype(np.uint8))


def read_intrinsics(path) -> tuple[CameraIntrinsics, float]:
    try:
        with open(path) as f:
            data = json.load(f)
        intr = CameraIntrinsics(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )
        depth_scale = float(data.get("depth_scale", DEFAULT_DEPTH_SCALE))
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: bad intrinsics file ({exc})") from exc
    if depth_scale <= 0:
        raise InputError(f"{path}: depth_scale must be positive")
    return intr, depth_scale


def write_intrinsics(path, intrinsics: CameraIntrinsics, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    with open(path, "w") as f:
        json.dump(
            {
                "fx": intrinsics.fx,
                "fy": intrinsics.fy,
                "cx": intrinsics.cx,
                "cy": intrinsics.cy,
                "width": intrinsics.width,
                "height": intrinsics.height,
                "depth_scale": depth_scale,
            },
            f,
            indent=2,
        )
        f.write("\n")


def encode_png_rgb(rgb: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", cv2.cvtColor(np.asarray(rgb, np.uint8), cv2.COLOR_RGB2BGR))
    if not ok:
        raise ValueError("PNG encoding failed")
    return buf.tobytes()


def decode_png_rgb(data: bytes) -> np.ndarray:
    bgr = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_COLOR)
    if bgr is None:
        raise ValueError("PNG decoding failed")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def encode_png_gray(gray: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", np.asarray(gray, np.uint8))
    if not ok:
        raise ValueError("PNG encoding failed")
    return buf.tobytes()


def decode_png_gray(data: bytes) -> np.ndarray:
    img = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise ValueError("PNG decoding failed")
    return img
