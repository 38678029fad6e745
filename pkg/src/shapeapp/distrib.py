"""Master/worker training over TCP.

Workers hold images and their latent variables; the master holds only the
model and receives sums over images.  Frames are::

    length u32 LE (payload bytes) | msg_type u8 | payload

Arrays travel as a 16-byte shape header (u8 ndim, u8 reserved, 7 x u16
dims) followed by float64 LE data.  Sums are sent as
:class:`~shapeapp.core.ExactSum` limbs, so the master's totals do not depend
on how the images are split between workers.
"""

from __future__ import annotations

import json
import logging
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from shapeapp.core import NOISE_FOR_KIND, ExactSum, Grid, HyperParams, ImageDataset, ModelState
from shapeapp.formats import MODEL_ARRAYS
from shapeapp.trainer import LocalData, Trainer, operators_for

log = logging.getLogger(__name__)

HELLO = 0x01
MODEL_BROADCAST = 0x02
DERIV_REQUEST = 0x03
AGG_REPLY = 0x04
LATENT_UPDATE_REQ = 0x05
LATENT_STATS_REPLY = 0x06
APPLY_TRANSFORM = 0x07
ERROR = 0x7F
SHUTDOWN = 0xFF
MSG_TYPES = {HELLO, MODEL_BROADCAST, DERIV_REQUEST, AGG_REPLY, LATENT_UPDATE_REQ,
             LATENT_STATS_REPLY, APPLY_TRANSFORM, ERROR, SHUTDOWN}

# DERIV_REQUEST kinds
KIND_MEAN = 1
KIND_SHAPE = 2
KIND_APPEARANCE = 3
KIND_OBJECTIVE = 4
KIND_SIGMA2 = 5
KIND_OBSERVED = 6
KIND_GRAM = 7
KIND_INIT_LATENTS = 8
KIND_ACK = 0

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 1 << 30
MAX_NDIM = 7

_FRAME = struct.Struct("<IB")
_SHAPE = struct.Struct("<BB7H")
_U32 = struct.Struct("<I")


class ProtocolError(ValueError):
    pass


class DistribError(RuntimeError):
    pass


# -- codecs -------------------------------------------------------------------

def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}")
    return _FRAME.pack(len(payload), msg_type) + payload


def encode_array(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim > MAX_NDIM:
        raise ProtocolError(f"arrays may have at most {MAX_NDIM} dimensions")
    if any(n > 0xFFFF for n in arr.shape):
        raise ProtocolError("array dimension exceeds 65535")
    dims = tuple(arr.shape) + (0,) * (MAX_NDIM - arr.ndim)
    return _SHAPE.pack(arr.ndim, 0, *dims) + arr.tobytes()


def decode_array(buf: bytes, offset: int = 0):
    """Returns ``(array, next_offset)``."""
    if len(buf) - offset < _SHAPE.size:
        raise ProtocolError("truncated array header")
    ndim, _, *dims = _SHAPE.unpack_from(buf, offset)
    if ndim > MAX_NDIM:
        raise ProtocolError(f"array header claims {ndim} dimensions")
    shape = tuple(dims[:ndim])
    offset += _SHAPE.size
    nbytes = 8 * int(np.prod(shape))
    if len(buf) - offset < nbytes:
        raise ProtocolError("truncated array data")
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
    return arr, offset + nbytes


def encode_arrays(arrays) -> bytes:
    return b"".join(encode_array(a) for a in arrays)


def decode_arrays(buf: bytes, offset: int = 0, count=None):
    out = []
    while offset < len(buf) and (count is None or len(out) < count):
        arr, offset = decode_array(buf, offset)
        out.append(arr)
    if count is not None and len(out) != count:
        raise ProtocolError(f"expected {count} arrays, got {len(out)}")
    if offset != len(buf):
        raise ProtocolError("trailing bytes after arrays")
    return out


def encode_json(obj) -> bytes:
    data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _U32.pack(len(data)) + data


def decode_json(buf: bytes, offset: int = 0):
    if len(buf) - offset < _U32.size:
        raise ProtocolError("truncated JSON length")
    (n,) = _U32.unpack_from(buf, offset)
    start = offset + _U32.size
    if len(buf) - start < n:
        raise ProtocolError("truncated JSON")
    try:
        return json.loads(buf[start:start + n].decode("utf-8")), start + n
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad JSON: {exc}") from None


def encode_model(model: ModelState) -> bytes:
    return encode_json({"hyper": model.hyper.to_json()}) + encode_arrays(
        getattr(model, name) for name in MODEL_ARRAYS
    )


def decode_model(buf: bytes) -> ModelState:
    header, offset = decode_json(buf)
    arrays = decode_arrays(buf, offset, count=len(MODEL_ARRAYS))
    hyper = HyperParams.from_json(header["hyper"])
    return ModelState(hyper=hyper, **dict(zip(MODEL_ARRAYS, arrays)))


def encode_sums(kind: int, sums) -> bytes:
    return struct.pack("<BB", kind, len(sums)) + encode_arrays(s.limbs for s in sums)


def decode_sums(buf: bytes):
    if len(buf) < 2:
        raise ProtocolError("truncated aggregate reply")
    kind, count = struct.unpack_from("<BB", buf)
    return kind, [ExactSum(limbs=a) for a in decode_arrays(buf, 2, count=count)]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket):
    """Returns ``(msg_type, payload)``; raises ProtocolError on a bad header."""
    length, msg_type = _FRAME.unpack(_recv_exact(sock, _FRAME.size))
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds limit")
    payload = _recv_exact(sock, length)
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}")
    return msg_type, payload


# -- worker -------------------------------------------------------------------

class WorkerServer:
    """Serves one image shard to one master connection at a time."""

    def __init__(self, shard: ImageDataset, host: str = "127.0.0.1", port: int = 0, threads: int = 1):
        self.shard = shard
        self.data = LocalData(shard, threads=threads)
        self.model = None
        self.sock = socket.create_server((host, port))
        self.address = self.sock.getsockname()[:2]

    def close(self):
        self.sock.close()

    def serve(self, connections: int = 1):
        """Handle ``connections`` master sessions, then close."""
        try:
            for _ in range(connections):
                conn, _ = self.sock.accept()
                with conn:
                    self._session(conn)
        finally:
            self.close()

    def _session(self, conn):
        while True:
            try:
                msg_type, payload = read_frame(conn)
            except ConnectionError:
                return
            except ProtocolError as exc:
                conn.sendall(encode_frame(ERROR, str(exc).encode()))
                return
            if msg_type == SHUTDOWN:
                return
            try:
                reply = self.handle(msg_type, payload)
            except Exception as exc:  # reported to the master, then the session ends
                log.debug("worker error", exc_info=True)
                conn.sendall(encode_frame(ERROR, f"{type(exc).__name__}: {exc}".encode()))
                return
            conn.sendall(reply)

    def _ops(self):
        if self.model is None:
            raise ProtocolError("no model has been broadcast")
        return operators_for(self.model.hyper, self.model.grid)

    def _set_model(self, model: ModelState):
        old = self.model
        if old is not None and old.W_v.shape == model.W_v.shape and np.array_equal(old.W_v, model.W_v):
            # keep the array object so cached deformations stay valid
            model = model.replace(W_v=old.W_v)
        self.model = model

    def handle(self, msg_type: int, payload: bytes) -> bytes:
        if msg_type == HELLO:
            ds = self.shard
            return encode_frame(HELLO, encode_json({
                "role": "worker",
                "version": PROTOCOL_VERSION,
                "n_images": ds.n_images,
                "channels": ds.n_channels,
                "dims": list(ds.grid.dims),
                "kind": ds.kind,
            }))
        if msg_type == MODEL_BROADCAST:
            self._set_model(decode_model(payload))
            return encode_frame(AGG_REPLY, encode_sums(KIND_ACK, []))
        if msg_type == APPLY_TRANSFORM:
            (T,) = decode_arrays(payload, count=1)
            if self.data.Z is None or T.shape != (self.data.Z.shape[0],) * 2:
                raise ProtocolError("transform does not match the latent dimension")
            self.data.transform(T)
            return encode_frame(AGG_REPLY, encode_sums(KIND_ACK, []))
        if msg_type == LATENT_UPDATE_REQ:
            (P,) = decode_arrays(payload, count=1)
            S, C_z, J, halvings = self.data.update_latents(self.model, self._ops(), P)
            count = ExactSum().add(float(self.shard.n_images))
            return encode_frame(LATENT_STATS_REPLY, encode_sums(KIND_ACK, [S, C_z, J, halvings, count]))
        if msg_type == DERIV_REQUEST:
            if not payload:
                raise ProtocolError("empty derivative request")
            kind = payload[0]
            params, _ = decode_json(payload, 1) if len(payload) > 1 else ({}, 1)
            return encode_frame(AGG_REPLY, encode_sums(kind, self._aggregate(kind, params)))
        raise ProtocolError(f"unexpected message type 0x{msg_type:02x}")

    def _aggregate(self, kind, params):
        data = self.data
        if kind == KIND_OBSERVED:
            return list(data.observed_sums())
        if kind == KIND_INIT_LATENTS:
            return [data.init_latents(int(params["seed"]), int(params["K"]))]
        if kind == KIND_GRAM:
            return [data.gram()]
        ops = self._ops()
        if kind == KIND_MEAN:
            return list(data.mean_derivatives(self.model, ops))
        if kind == KIND_SHAPE:
            return list(data.shape_derivatives(self.model, ops))
        if kind == KIND_APPEARANCE:
            return list(data.appearance_derivatives(self.model, ops))
        if kind == KIND_OBJECTIVE:
            try:
                return [data.energy(self.model, ops)]
            except FloatingPointError:
                return []  # tells the master the candidate diverged
        if kind == KIND_SIGMA2:
            return list(data.sigma2_stats(self.model, ops))
        raise ProtocolError(f"unknown derivative kind {kind}")


def serve_worker(shard: ImageDataset, endpoint, threads: int = 1, connections: int = 1):
    """Listen on ``endpoint`` (``(host, port)``) and serve until SHUTDOWN."""
    host, port = endpoint
    WorkerServer(shard, host, port, threads).serve(connections)


# -- master -------------------------------------------------------------------

@dataclass
class FrameRecord:
    direction: str
    endpoint: int
    msg_type: int
    length: int


@dataclass
class Capture:
    frames: list = field(default_factory=list)


class RemoteBackend:
    """Data backend whose images live on remote workers."""

    def __init__(self, endpoints, capture: Capture = None, timeout=None):
        if not endpoints:
            raise DistribError("no workers given")
        self.endpoints = list(endpoints)
        self.capture = capture
        self.socks = []
        for ep in self.endpoints:
            try:
                self.socks.append(socket.create_connection(tuple(ep), timeout=timeout))
            except OSError as exc:
                self.close()
                raise DistribError(f"cannot reach worker {ep}: {exc}") from None
        hellos = self._round([(HELLO, encode_json({"role": "master", "version": PROTOCOL_VERSION}))] * len(self.socks),
                             expect=HELLO)
        self.info = [decode_json(p)[0] for p in hellos]
        first = self.info[0]
        for i, info in enumerate(self.info):
            if info.get("version") != PROTOCOL_VERSION:
                raise DistribError(f"worker {self.endpoints[i]} speaks protocol {info.get('version')}")
            for key in ("channels", "dims", "kind"):
                if info[key] != first[key]:
                    raise DistribError(f"worker {self.endpoints[i]} disagrees on {key}")
        self.counts = [int(info["n_images"]) for info in self.info]
        self.grid = Grid(tuple(first["dims"]))
        self.n_channels = int(first["channels"])
        self.kind = first["kind"]
        self._broadcast = None

    @property
    def n_images(self):
        return sum(self.counts)

    # transport

    def _send(self, i, msg_type, payload):
        frame = encode_frame(msg_type, payload)
        if self.capture is not None:
            self.capture.frames.append(FrameRecord("out", i, msg_type, len(payload)))
        try:
            self.socks[i].sendall(frame)
        except OSError as exc:
            raise DistribError(f"worker {self.endpoints[i]} unreachable: {exc}") from None

    def _recv(self, i, expect):
        try:
            msg_type, payload = read_frame(self.socks[i])
        except (OSError, ConnectionError, ProtocolError) as exc:
            raise DistribError(f"worker {self.endpoints[i]} failed: {exc}") from None
        if self.capture is not None:
            self.capture.frames.append(FrameRecord("in", i, msg_type, len(payload)))
        if msg_type == ERROR:
            raise DistribError(f"worker {self.endpoints[i]} reported: {payload.decode(errors='replace')}")
        if msg_type != expect:
            raise DistribError(f"worker {self.endpoints[i]} sent 0x{msg_type:02x}, expected 0x{expect:02x}")
        return payload

    def _round(self, requests, expect):
        """Send one request per worker, then collect replies in endpoint order."""
        for i, (msg_type, payload) in enumerate(requests):
            self._send(i, msg_type, payload)
        return [self._recv(i, expect) for i in range(len(self.socks))]

    def _all(self, msg_type, payload, expect=AGG_REPLY):
        return self._round([(msg_type, payload)] * len(self.socks), expect)

    def _sums(self, replies):
        return self._sums_list([decode_sums(p)[1] for p in replies])

    @staticmethod
    def _sums_list(per_worker):
        total = None
        for sums in per_worker:
            if total is None:
                total = sums
            else:
                for t, s in zip(total, sums):
                    t.merge(s)
        return total

    def _request(self, kind, params=None):
        payload = bytes([kind]) + (encode_json(params) if params else b"")
        return self._sums(self._all(DERIV_REQUEST, payload))

    def broadcast(self, model: ModelState):
        if self._broadcast is model:
            return
        self._all(MODEL_BROADCAST, encode_model(model))
        self._broadcast = model

    def shutdown(self):
        for i, sock in enumerate(self.socks):
            try:
                self._send(i, SHUTDOWN, b"")
            except DistribError:
                pass
        self.close()

    def close(self):
        for sock in self.socks:
            sock.close()

    # backend interface (mirrors LocalData)

    def observed_sums(self):
        return tuple(self._request(KIND_OBSERVED))

    def init_latents(self, seed, K):
        return self._request(KIND_INIT_LATENTS, {"seed": int(seed), "K": int(K)})[0]

    def gram(self):
        return self._request(KIND_GRAM)[0]

    def transform(self, T):
        self._all(APPLY_TRANSFORM, encode_array(np.asarray(T, dtype=float)))

    def energy(self, model, ops):
        """Summed energy; ``FloatingPointError`` if any worker's warps diverged."""
        self.broadcast(model)
        replies = [decode_sums(p)[1] for p in self._all(DERIV_REQUEST, bytes([KIND_OBJECTIVE]))]
        if any(not sums for sums in replies):
            raise FloatingPointError("a worker's warps diverged")
        return self._sums_list(replies)[0]

    def sigma2_stats(self, model, ops):
        self.broadcast(model)
        sse, count = self._request(KIND_SIGMA2)
        return sse, count

    def mean_derivatives(self, model, ops):
        self.broadcast(model)
        return tuple(self._request(KIND_MEAN))

    def shape_derivatives(self, model, ops):
        self.broadcast(model)
        return tuple(self._request(KIND_SHAPE))

    def appearance_derivatives(self, model, ops):
        self.broadcast(model)
        return tuple(self._request(KIND_APPEARANCE))

    def update_latents(self, model, ops, P):
        self.broadcast(model)
        S, C_z, J, halvings, _ = self._sums(
            self._all(LATENT_UPDATE_REQ, encode_array(P), expect=LATENT_STATS_REPLY)
        )
        return S, C_z, J, halvings


def master_train(endpoints, hyper: HyperParams, seed: int = 0, capture: Capture = None):
    """Train against remote workers; returns ``(ModelState, TrainReport)``."""
    backend = RemoteBackend(endpoints, capture)
    try:
        if NOISE_FOR_KIND[backend.kind] != hyper.noise:
            raise DistribError(f"noise model {hyper.noise!r} does not suit {backend.kind!r} data")
        trainer = Trainer(backend, hyper, backend.grid, backend.n_channels, backend.n_images, seed)
        model, report = trainer.run()
    finally:
        backend.shutdown()
    return model, report
