import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class RecordingHttpServer:
    """Local HTTP server for exercising wire protocols in tests.

    Each instance dispatches POSTs to a user-supplied callable
    ``handler(path, payload) -> (status, response_dict)`` and records every
    payload it saw. ``fail_next(n)`` makes the following n requests return
    HTTP 500 before the handler runs.
    """

    def __init__(self, handler):
        self.handler = handler
        self.payloads = []
        self.paths = []
        self._failures = 0
        self._lock = threading.Lock()
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length))
                with outer._lock:
                    outer.payloads.append(payload)
                    outer.paths.append(self.path)
                    if outer._failures > 0:
                        outer._failures -= 1
                        self.send_response(500)
                        self.end_headers()
                        self.wfile.write(b"injected failure")
                        return
                status, body = outer.handler(self.path, payload)
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def fail_next(self, n):
        with self._lock:
            self._failures = n

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def http_server_factory():
    servers = []

    def factory(handler):
        server = RecordingHttpServer(handler)
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.close()
