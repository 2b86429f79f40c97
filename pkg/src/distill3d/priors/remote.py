"""Newline-delimited JSON over TCP for out-of-process priors and encoders.

Request::

    {"v":1,"op":"denoise","t":0.5,"shape":[3,64,64],"latent":"<b64 f32le>",
     "cond":{"kind":"embedding"|"view","data":{...}}}

Response::

    {"v":1,"ok":true,"denoised":"<b64 f32le>"}  or  {"v":1,"ok":false,"err":"..."}

An ``embed`` op (``"image"`` payload in, ``"embedding"`` payload out) serves
remote encoders with the same framing.
"""
from __future__ import annotations

import base64
import json
import logging
import socket
import socketserver
import threading
from typing import Callable, Optional

import numpy as np
import torch

from ..errors import DenoiserTimeout, DenoiserUnavailable, MalformedResponse, ProtocolVersionError
from ..scene import CameraPose
from .base import Denoiser, EmbeddingCondition, ViewCondition

PROTOCOL_VERSION = 1
log = logging.getLogger(__name__)


def encode_floats(values) -> str:
    a = np.ascontiguousarray(np.asarray(values), dtype="<f4")
    return base64.b64encode(a.tobytes()).decode("ascii")


def decode_floats(payload: str, shape=None) -> np.ndarray:
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except (ValueError, AttributeError) as exc:
        raise MalformedResponse(f"bad base64 payload: {exc}") from exc
    if len(raw) % 4:
        raise MalformedResponse("payload length is not a multiple of 4 bytes")
    a = np.frombuffer(raw, dtype="<f4")
    if shape is not None:
        if a.size != int(np.prod(shape)):
            raise MalformedResponse(f"payload holds {a.size} floats, expected shape {list(shape)}")
        a = a.reshape(shape)
    return a


def _pose_dict(p: CameraPose) -> dict:
    return {"elevation": p.elevation, "azimuth": p.azimuth, "distance": p.distance,
            "fov": p.fov, "width": p.width, "height": p.height}


def encode_condition(cond) -> dict:
    if cond is None:
        return {"kind": "none", "data": None}
    if isinstance(cond, EmbeddingCondition):
        data = {"embedding": encode_floats(cond.embedding), "dim": int(cond.embedding.size),
                "image_kind": cond.image_kind}
        if cond.pose is not None:
            data["pose"] = _pose_dict(cond.pose)
        return {"kind": "embedding", "data": data}
    if isinstance(cond, ViewCondition):
        ref = np.asarray(cond.reference_image, dtype=np.float64)
        return {"kind": "view", "data": {
            "R": cond.rotation.tolist(), "T": cond.translation.tolist(), "fov": cond.fov,
            "image_kind": cond.image_kind, "ref_pose": _pose_dict(cond.reference_pose),
            "ref_shape": list(ref.shape), "ref": encode_floats(ref)}}
    raise TypeError(f"cannot serialise condition of type {type(cond).__name__}")


def decode_condition(d: dict):
    kind = d.get("kind")
    data = d.get("data")
    if kind == "none":
        return None
    if kind == "embedding":
        emb = decode_floats(data["embedding"], (int(data["dim"]),)).astype(np.float64)
        emb = emb / np.linalg.norm(emb)
        pose = CameraPose(**data["pose"]) if data.get("pose") else None
        return EmbeddingCondition(emb, pose, data.get("image_kind", "rgb"))
    if kind == "view":
        ref = decode_floats(data["ref"], tuple(data["ref_shape"])).astype(np.float64)
        return ViewCondition(ref, np.array(data["R"]), np.array(data["T"]),
                             CameraPose(**data["ref_pose"]), float(data["fov"]),
                             data.get("image_kind", "rgb"))
    raise MalformedResponse(f"unknown condition kind {kind!r}")


def encode_request(z_t, t: float, cond) -> bytes:
    z = z_t.detach().numpy() if isinstance(z_t, torch.Tensor) else np.asarray(z_t)
    msg = {"v": PROTOCOL_VERSION, "op": "denoise", "t": float(t), "shape": list(z.shape),
           "latent": encode_floats(z), "cond": encode_condition(cond)}
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def encode_response(denoised=None, err: Optional[str] = None, key: str = "denoised") -> bytes:
    if err is not None:
        msg = {"v": PROTOCOL_VERSION, "ok": False, "err": err}
    else:
        msg = {"v": PROTOCOL_VERSION, "ok": True, key: encode_floats(denoised)}
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def parse_line(line: bytes) -> dict:
    if not line.endswith(b"\n"):
        raise MalformedResponse("truncated frame (no terminating newline)")
    try:
        msg = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedResponse(f"invalid JSON frame: {exc}") from exc
    if not isinstance(msg, dict):
        raise MalformedResponse("frame is not a JSON object")
    if msg.get("v") != PROTOCOL_VERSION:
        raise ProtocolVersionError(f"protocol version {msg.get('v')!r}, expected {PROTOCOL_VERSION}")
    return msg


def decode_response(line: bytes, shape, key: str = "denoised") -> np.ndarray:
    msg = parse_line(line)
    if not msg.get("ok", False):
        raise DenoiserUnavailable(f"remote prior error: {msg.get('err', 'unknown')}")
    if key not in msg:
        raise MalformedResponse(f"response lacks {key!r}")
    return decode_floats(msg[key], shape)


class RemoteClient:
    """One persistent connection; requests are serialised (one in flight)."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host, self.port, self.timeout = host, int(port), float(timeout)
        self._sock: Optional[socket.socket] = None
        self._reader = None
        self._lock = threading.Lock()

    def _connect(self):
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except socket.timeout as exc:
            raise DenoiserTimeout(f"connect to {self.host}:{self.port} timed out") from exc
        except OSError as exc:
            raise DenoiserUnavailable(f"cannot connect to {self.host}:{self.port}: {exc}") from exc
        self._sock.settimeout(self.timeout)
        self._reader = self._sock.makefile("rb")

    def close(self):
        if self._reader is not None:
            self._reader.close()
        if self._sock is not None:
            self._sock.close()
        self._sock = self._reader = None

    def roundtrip(self, payload: bytes) -> bytes:
        with self._lock:
            if self._sock is None:
                self._connect()
            try:
                self._sock.sendall(payload)
                line = self._reader.readline()
            except socket.timeout as exc:
                self.close()
                raise DenoiserTimeout(f"no response from {self.host}:{self.port} "
                                      f"within {self.timeout}s") from exc
            except OSError as exc:
                self.close()
                raise DenoiserUnavailable(f"connection error: {exc}") from exc
            if not line.endswith(b"\n"):
                self.close()
            return line


class RemotePrior(Denoiser):
    name = "remote"

    def __init__(self, host: str, port: int, timeout: float = 30.0, schedule=None):
        super().__init__(schedule)
        self.client = RemoteClient(host, port, timeout)

    def denoise(self, z_t, t, cond):
        line = self.client.roundtrip(encode_request(z_t, t, cond))
        out = decode_response(line, tuple(z_t.shape))
        return torch.from_numpy(out.astype(np.float64))


def remote_denoise(client: RemotePrior, z_t, t, cond):
    return client.denoise(z_t, t, cond)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                return
            self.wfile.write(self.server.respond(line))


class PriorServer(socketserver.ThreadingTCPServer):
    """Serves any ``denoise(z, t, cond)`` callable (and optionally an image embedder)."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, denoise_fn: Callable, host: str = "127.0.0.1", port: int = 0,
                 embed_fn: Optional[Callable] = None):
        super().__init__((host, port), _Handler)
        self.denoise_fn = denoise_fn
        self.embed_fn = embed_fn
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self):
        return self.server_address[0], self.server_address[1]

    def respond(self, line: bytes) -> bytes:
        try:
            msg = parse_line(line)
            op = msg.get("op")
            if op == "denoise":
                z = decode_floats(msg["latent"], tuple(msg["shape"]))
                cond = decode_condition(msg["cond"])
                out = self.denoise_fn(z, float(msg["t"]), cond)
                return encode_response(np.asarray(out))
            if op == "embed" and self.embed_fn is not None:
                img = decode_floats(msg["image"], tuple(msg["shape"]))
                return encode_response(np.asarray(self.embed_fn(img)), key="embedding")
            return encode_response(err=f"unsupported op {op!r}")
        except Exception as exc:  # report to the peer instead of dropping the connection
            log.debug("request failed: %s", exc)
            return encode_response(err=str(exc))

    def start(self) -> "PriorServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


def echo_server(host: str = "127.0.0.1", port: int = 0) -> PriorServer:
    """Loopback server returning each request latent unchanged."""
    return PriorServer(lambda z, t, cond: z, host, port)


def serve_denoiser(denoiser: Denoiser, host: str = "127.0.0.1", port: int = 0) -> PriorServer:
    def fn(z, t, cond):
        with torch.no_grad():
            out = denoiser.denoise(torch.from_numpy(z.astype(np.float64)), t, cond)
        return out.numpy()
    return PriorServer(fn, host, port)
