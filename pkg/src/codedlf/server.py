"""HTTP render service hosting a trained checkpoint over one observation.

The feature volume is computed exactly once at startup (the per-request
work is ray rendering only); `featnet_calls` counts volume computations so
tests can assert the once-per-observation contract. Responses are pure
functions of (checkpoint, observation, query), so identical queries return
byte-identical PNG bodies, and a small LRU cache keyed by the quantized
viewpoint short-circuits repeats.
"""

from __future__ import annotations

import json
import math
import os
import threading
from collections import OrderedDict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .imgfile import encode_unit_png16
from .rendering import pseudo_depth_to_unit, render_view
from .training import Checkpoint, checkpoint_feature_volume


class RenderService:
    def __init__(self, ckpt: Checkpoint, image: np.ndarray,
                 u_range: tuple[float, float] = (-3.0, 3.0),
                 v_range: tuple[float, float] = (-3.0, 3.0),
                 cache_size: int = 64):
        self.ckpt = ckpt
        self.u_range = (float(u_range[0]), float(u_range[1]))
        self.v_range = (float(v_range[0]), float(v_range[1]))
        self.height, self.width = image.shape
        self.featnet_calls = 0
        dtype = np.float32 if ckpt.meta.get("dtype", "float32") == "float32" else np.float64
        self.volume, self.store = checkpoint_feature_volume(ckpt, image.astype(dtype))
        self.featnet_calls += 1
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def info(self) -> dict:
        return {"H": self.height, "W": self.width,
                "t_min": self.ckpt.render.t_min, "t_max": self.ckpt.render.t_max,
                "u_range": list(self.u_range), "v_range": list(self.v_range)}

    def render_png(self, u: float, v: float, depth: bool = False) -> bytes:
        key = (round(u, 4), round(v, 4), depth)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        img, dmap = render_view(self.volume, self.store, self.ckpt.nerfnet,
                                (u, v), self.width, self.height, self.ckpt.render)
        body = encode_unit_png16(pseudo_depth_to_unit(dmap, self.ckpt.render)
                                 if depth else img)
        with self._lock:
            self._cache[key] = body
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return body


class _Handler(BaseHTTPRequestHandler):
    service: RenderService = None
    web_dir: str | None = None

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send(self, code: int, content_type: str, body: bytes) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, code: int, doc: dict) -> None:
        self._send(code, "application/json", json.dumps(doc).encode("utf-8"))

    def do_GET(self):
        parsed = urlparse(self.path)
        if parsed.path == "/api/info":
            self._send_json(200, self.service.info())
            return
        if parsed.path == "/api/render":
            qs = parse_qs(parsed.query)
            try:
                u = float(qs["u"][0])
                v = float(qs["v"][0])
            except (KeyError, ValueError, IndexError):
                self._send_json(400, {"error": "u and v must be finite numbers"})
                return
            if not (math.isfinite(u) and math.isfinite(v)):
                self._send_json(400, {"error": "u and v must be finite numbers"})
                return
            depth = qs.get("depth", ["0"])[0] in ("1", "true")
            self._send(200, "image/png", self.service.render_png(u, v, depth))
            return
        if self.web_dir:
            rel = parsed.path.lstrip("/") or "index.html"
            full = os.path.realpath(os.path.join(self.web_dir, rel))
            root = os.path.realpath(self.web_dir)
            if full.startswith(root + os.sep) or full == root:
                if os.path.isfile(full):
                    ctype = {"html": "text/html", "js": "text/javascript",
                             "css": "text/css", "png": "image/png",
                             "map": "application/json"}.get(
                                 full.rsplit(".", 1)[-1], "application/octet-stream")
                    with open(full, "rb") as f:
                        self._send(200, ctype, f.read())
                    return
        self._send_json(404, {"error": f"unknown route {parsed.path}"})


def make_server(service: RenderService, host: str = "127.0.0.1", port: int = 0,
                web_dir: str | None = None) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,),
                   {"service": service, "web_dir": web_dir})
    return ThreadingHTTPServer((host, port), handler)
