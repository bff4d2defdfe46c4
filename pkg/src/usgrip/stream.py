"""UDP frame streaming: wire formats, reassembly, inference server and client.

A client downsamples each frame to 80x80, cuts the 6400 bytes into
datagrams of at most 1280 payload bytes and waits for a prediction reply.
The server reassembles chunks per (sender, frame_id), runs inference on a
worker thread and answers every completed frame.

Wire layout (big-endian)::

    FrameChunk     magic u16 | version u8 | type u8 = 1 | frame_id u32 |
                   chunk_index u16 | chunk_count u16 | payload_len u16 | payload
    PredictionMsg  magic u16 | version u8 | type u8 = 2 | frame_id u32 |
                   predicted_class u8 | flags u8 | 4 x f32 probabilities |
                   inference_micros u32                     (30 bytes)
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import downsample
from .quant import quantized_forward

log = logging.getLogger(__name__)

MAGIC = 0x5547
VERSION = 1
MSG_CHUNK = 0x01
MSG_PREDICTION = 0x02
MAX_PAYLOAD = 1280
FRAME_SHAPE = (80, 80, 1)

FLAG_COMPLETE = 0x01
FLAG_ERROR = 0x02   # frame could not be run (wrong size); probabilities are uniform

_CHUNK_HEAD = struct.Struct(">HBBIHHH")
_PREDICTION = struct.Struct(">HBBIBB4fI")

REASSEMBLY_TIMEOUT_S = 0.5
MAX_IN_FLIGHT = 64
REPLY_TIMEOUT_S = 1.0


class ProtocolError(ValueError):
    pass


class StreamAborted(ConnectionError):
    pass


@dataclass(frozen=True)
class FrameChunk:
    frame_id: int
    chunk_index: int
    chunk_count: int
    payload: bytes

    def encode(self):
        return _CHUNK_HEAD.pack(MAGIC, VERSION, MSG_CHUNK, self.frame_id, self.chunk_index,
                                self.chunk_count, len(self.payload)) + self.payload

    @classmethod
    def decode(cls, buf):
        if len(buf) < _CHUNK_HEAD.size:
            raise ProtocolError(f"chunk shorter than header ({len(buf)} bytes)")
        magic, version, kind, fid, idx, count, plen = _CHUNK_HEAD.unpack_from(buf)
        _check_head(magic, version, kind, MSG_CHUNK)
        if plen > MAX_PAYLOAD or len(buf) != _CHUNK_HEAD.size + plen:
            raise ProtocolError(f"payload_len {plen} does not match datagram of {len(buf)} bytes")
        if idx >= count:
            raise ProtocolError(f"chunk_index {idx} >= chunk_count {count}")
        return cls(fid, idx, count, bytes(buf[_CHUNK_HEAD.size:]))


@dataclass(frozen=True)
class PredictionMsg:
    frame_id: int
    predicted_class: int
    flags: int
    probabilities: tuple
    inference_micros: int

    SIZE = _PREDICTION.size

    def encode(self):
        return _PREDICTION.pack(MAGIC, VERSION, MSG_PREDICTION, self.frame_id,
                                self.predicted_class, self.flags, *self.probabilities,
                                self.inference_micros)

    @classmethod
    def decode(cls, buf):
        if len(buf) != _PREDICTION.size:
            raise ProtocolError(f"prediction must be {_PREDICTION.size} bytes, got {len(buf)}")
        magic, version, kind, fid, cls_, flags, *rest = _PREDICTION.unpack(buf)
        _check_head(magic, version, kind, MSG_PREDICTION)
        return cls(fid, cls_, flags, tuple(rest[:4]), rest[4])

    @classmethod
    def from_probs(cls, frame_id, probs, seconds, flags=FLAG_COMPLETE):
        p = np.asarray(probs, np.float32)
        micros = min(int(round(seconds * 1e6)), 0xFFFFFFFF)
        return cls(frame_id & 0xFFFFFFFF, int(np.argmax(p)), flags,
                   tuple(float(v) for v in p), micros)


def _check_head(magic, version, kind, want):
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:04x}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if kind != want:
        raise ProtocolError(f"unexpected message type 0x{kind:02x}")


def decode_datagram(buf):
    if len(buf) < 4:
        raise ProtocolError(f"datagram of {len(buf)} bytes is too short")
    kind = buf[3]
    if kind == MSG_CHUNK:
        return FrameChunk.decode(buf)
    if kind == MSG_PREDICTION:
        return PredictionMsg.decode(buf)
    raise ProtocolError(f"unknown message type 0x{kind:02x}")


def chunk_frame(frame, frame_id, payload_size=MAX_PAYLOAD):
    """Split a frame's bytes into evenly sized chunks (the last may be shorter)."""
    data = np.ascontiguousarray(frame, np.uint8).tobytes()
    if not 0 < payload_size <= MAX_PAYLOAD:
        raise ValueError(f"payload_size must be in 1..{MAX_PAYLOAD}")
    count = max(-(-len(data) // payload_size), 1)
    if count > 0xFFFF:
        raise ValueError(f"frame of {len(data)} bytes needs {count} chunks (max 65535)")
    return [FrameChunk(frame_id & 0xFFFFFFFF, i, count,
                       data[i * payload_size:(i + 1) * payload_size]) for i in range(count)]


def reassemble(chunks):
    """Concatenate a complete set of chunks of one frame, in any order."""
    r = Reassembler()
    out = None
    for c in chunks:
        done = r.add(c)
        if done is not None:
            out = done[1]
    if out is None:
        raise ProtocolError("chunk set is incomplete")
    return out


# ---------------------------------------------------------------- reassembly


@dataclass
class _Pending:
    count: int
    parts: dict
    created: float


class Reassembler:
    """Per-(sender, frame_id) chunk collection.

    A frame is released exactly once, when its last missing chunk arrives.
    Incomplete frames expire after ``timeout`` seconds; at most ``max_frames``
    are held, the oldest being evicted. Both count as lost.
    """

    def __init__(self, timeout=REASSEMBLY_TIMEOUT_S, max_frames=MAX_IN_FLIGHT, clock=time.monotonic):
        self.timeout = timeout
        self.max_frames = max_frames
        self.clock = clock
        self.pending = OrderedDict()
        self._done = OrderedDict()
        self.lost = 0
        self.duplicates = 0
        self.inconsistent = 0

    def add(self, chunk, sender=None):
        """Returns ``(key, frame_bytes)`` when ``chunk`` completes a frame, else None."""
        key = (sender, chunk.frame_id)
        if key in self._done:
            self.duplicates += 1
            return None
        p = self.pending.get(key)
        if p is None:
            while len(self.pending) >= self.max_frames:
                self.pending.popitem(last=False)
                self.lost += 1
            p = self.pending[key] = _Pending(chunk.chunk_count, {}, self.clock())
        elif p.count != chunk.chunk_count:
            self.inconsistent += 1
            return None
        if chunk.chunk_index in p.parts:
            self.duplicates += 1
            return None
        p.parts[chunk.chunk_index] = chunk.payload
        if len(p.parts) < p.count:
            return None
        del self.pending[key]
        self._done[key] = True
        while len(self._done) > 4 * self.max_frames:
            self._done.popitem(last=False)
        return key, b"".join(p.parts[i] for i in range(p.count))

    def expire(self):
        now = self.clock()
        stale = [k for k, p in self.pending.items() if now - p.created > self.timeout]
        for k in stale:
            del self.pending[k]
        self.lost += len(stale)
        return len(stale)


# ---------------------------------------------------------------- server


class _LatestSlot:
    """Capacity-1 channel where a new frame replaces one not yet taken."""

    def __init__(self):
        self._item = None
        self._cond = threading.Condition()
        self.superseded = 0

    def put(self, item, stop):
        with self._cond:
            if self._item is not None:
                self.superseded += 1
            self._item = item
            self._cond.notify()

    def get(self, timeout):
        with self._cond:
            if self._item is None:
                self._cond.wait(timeout)
            item, self._item = self._item, None
            return item


class _QueueChannel:
    def __init__(self, capacity):
        self._q = queue.Queue(capacity)
        self.superseded = 0

    def put(self, item, stop):
        while not stop.is_set():
            try:
                self._q.put(item, timeout=0.05)
                return
            except queue.Full:
                continue

    def get(self, timeout):
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None


@dataclass
class ServerStats:
    datagrams: int = 0
    malformed: int = 0
    frames_completed: int = 0
    frames_inferred: int = 0
    frames_lost: int = 0
    frames_superseded: int = 0
    duplicate_chunks: int = 0
    shape_errors: int = 0
    replies_sent: int = 0
    inference_seconds: list = field(default_factory=list, repr=False)

    def summary(self):
        d = {k: v for k, v in asdict(self).items() if k != "inference_seconds"}
        t = self.inference_seconds
        d["mean_inference_ms"] = 1e3 * float(np.mean(t)) if t else None
        return d


class FrameServer:
    """Receive loop + one inference worker around a loaded model.

    ``policy`` is ``"queue"`` (lossless, up to 64 frames buffered) or
    ``"latest_wins"`` (a frame waiting for the worker is replaced by a newer
    one).
    """

    def __init__(self, model, bind=("127.0.0.1", 0), policy="latest_wins",
                 frame_shape=FRAME_SHAPE, stats_interval=5.0):
        if policy not in ("queue", "latest_wins"):
            raise ValueError(f"unknown policy {policy!r}")
        if tuple(model.input_shape) != tuple(frame_shape):
            raise ValueError(f"model input {model.input_shape} does not match frames {frame_shape}")
        self.model = model
        self.policy = policy
        self.frame_shape = tuple(frame_shape)
        self.frame_bytes = int(np.prod(frame_shape))
        self.stats = ServerStats()
        self.stats_interval = stats_interval
        self.reassembler = Reassembler()
        self.channel = _QueueChannel(MAX_IN_FLIGHT) if policy == "queue" else _LatestSlot()
        self._stop = threading.Event()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
        self.sock.bind(bind)
        self.sock.settimeout(0.05)
        self._threads = []

    @property
    def address(self):
        return self.sock.getsockname()

    def start(self):
        self._threads = [threading.Thread(target=self._receive_loop, name="usgrip-recv", daemon=True),
                         threading.Thread(target=self._worker, name="usgrip-infer", daemon=True)]
        for t in self._threads:
            t.start()
        log.info("serving %s on %s:%d (policy %s)", self.model.quant, *self.address, self.policy)
        return self

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)
        self.sock.close()
        self._sync_counters()
        log.info("server stopped: %s", self.stats.summary())

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def wait(self):
        """Block until stopped (e.g. by KeyboardInterrupt in the caller)."""
        last = time.monotonic()
        while not self._stop.wait(0.2):
            if time.monotonic() - last >= self.stats_interval:
                self._sync_counters()
                log.info("stats: %s", self.stats.summary())
                last = time.monotonic()

    def _sync_counters(self):
        self.stats.frames_lost = self.reassembler.lost
        self.stats.duplicate_chunks = self.reassembler.duplicates
        self.stats.frames_superseded = self.channel.superseded

    def _receive_loop(self):
        while not self._stop.is_set():
            try:
                buf, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                self.reassembler.expire()
                continue
            except OSError:
                break
            self.stats.datagrams += 1
            try:
                msg = decode_datagram(buf)
                if not isinstance(msg, FrameChunk):
                    raise ProtocolError("server accepts frame chunks only")
            except ProtocolError:
                self.stats.malformed += 1
                continue
            done = self.reassembler.add(msg, addr)
            if done is not None:
                self.stats.frames_completed += 1
                self.channel.put((addr, msg.frame_id, done[1]), self._stop)
            self.reassembler.expire()

    def _worker(self):
        while not self._stop.is_set():
            item = self.channel.get(0.05)
            if item is None:
                continue
            addr, fid, data = item
            if len(data) != self.frame_bytes:
                self.stats.shape_errors += 1
                n = self.model.num_classes
                reply = PredictionMsg.from_probs(fid, np.full(n, 1 / n), 0.0,
                                                 FLAG_COMPLETE | FLAG_ERROR)
            else:
                frame = np.frombuffer(data, np.uint8).reshape(self.frame_shape)
                timings = []
                probs = quantized_forward(self.model, frame, timings)
                self.stats.frames_inferred += 1
                self.stats.inference_seconds.append(timings[0])
                reply = PredictionMsg.from_probs(fid, probs, timings[0])
            try:
                self.sock.sendto(reply.encode(), addr)
                self.stats.replies_sent += 1
            except OSError as exc:
                log.warning("reply to %s failed: %s", addr, exc)


def serve(bind_addr, model, policy="latest_wins", on_ready=None):
    """Run a :class:`FrameServer` until interrupted; returns its final stats."""
    server = FrameServer(model, bind_addr, policy)
    server.start()
    if on_ready is not None:
        on_ready(server)
    try:
        server.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return server.stats


# ---------------------------------------------------------------- client


@dataclass
class ClientReport:
    frames_requested: int = 0
    frames_sent: int = 0
    replies: int = 0
    lost: int = 0
    correct: int = 0
    accuracy: float | None = None
    latency_mean_s: float | None = None
    latency_p50_s: float | None = None
    latency_p95_s: float | None = None
    frame_period_mean_s: float | None = None
    server_inference_mean_s: float | None = None
    rate_hz: float = 10.0
    inter_frame_delay_s: float = 0.1
    latency_scope: str = "end_to_end: first chunk sent -> prediction received"
    predictions: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)


def _as_wire_frame(frame):
    f = np.asarray(frame, np.uint8)
    if f.ndim == 3:
        f = f[..., 0]
    if f.shape == FRAME_SHAPE[:2]:
        return f
    if f.shape[0] % FRAME_SHAPE[0] == 0 and f.shape[0] // FRAME_SHAPE[0] == f.shape[1] // FRAME_SHAPE[1]:
        return downsample(f, f.shape[0] // FRAME_SHAPE[0])
    raise ValueError(f"cannot send a frame of shape {f.shape}")


def stream_client(target_addr, frames, labels=None, rate_hz=10.0, inter_frame_delay_s=0.1,
                  reply_timeout_s=REPLY_TIMEOUT_S, max_timeout_streak=10, first_frame_id=0):
    """Stream frames to a server one at a time and collect predictions.

    Frame ``i`` is not sent before ``start + i / rate_hz``; after each reply
    (or timeout) the client also sleeps ``inter_frame_delay_s``. More than
    ``max_timeout_streak`` consecutive timeouts abort the run.
    """
    n = len(frames)
    report = ClientReport(frames_requested=n, rate_hz=rate_hz, inter_frame_delay_s=inter_frame_delay_s)
    if n == 0:
        return report
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    latencies, starts, server_t = [], [], []
    streak = 0
    try:
        t_start = time.perf_counter()
        for i in range(n):
            if rate_hz and rate_hz > 0:
                wait = t_start + i / rate_hz - time.perf_counter()
                if wait > 0:
                    time.sleep(wait)
            fid = (first_frame_id + i) & 0xFFFFFFFF
            chunks = [c.encode() for c in chunk_frame(_as_wire_frame(frames[i]), fid)]
            t0 = time.perf_counter()
            starts.append(t0)
            for c in chunks:
                sock.sendto(c, target_addr)
            report.frames_sent += 1
            msg = _await_reply(sock, fid, t0 + reply_timeout_s)
            if msg is None:
                report.lost += 1
                report.predictions.append(-1)
                streak += 1
                if streak > max_timeout_streak:
                    raise StreamAborted(f"no reply from {target_addr} for {streak} consecutive frames")
            else:
                streak = 0
                latencies.append(time.perf_counter() - t0)
                server_t.append(msg.inference_micros * 1e-6)
                report.replies += 1
                report.predictions.append(msg.predicted_class)
                if labels is not None and msg.predicted_class == int(labels[i]):
                    report.correct += 1
            if inter_frame_delay_s > 0:
                time.sleep(inter_frame_delay_s)
    finally:
        sock.close()
    if labels is not None and report.replies:
        report.accuracy = report.correct / report.replies
    if latencies:
        lat = np.asarray(latencies)
        report.latency_mean_s = float(lat.mean())
        report.latency_p50_s = float(np.percentile(lat, 50))
        report.latency_p95_s = float(np.percentile(lat, 95))
        report.server_inference_mean_s = float(np.mean(server_t))
    if len(starts) > 1:
        report.frame_period_mean_s = float(np.mean(np.diff(starts)))
    return report


def _await_reply(sock, frame_id, deadline):
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return None
        sock.settimeout(remaining)
        try:
            buf, _ = sock.recvfrom(2048)
        except socket.timeout:
            return None
        try:
            msg = PredictionMsg.decode(buf)
        except ProtocolError:
            continue
        if msg.frame_id == frame_id:
            return msg
