"""Hub-and-spoke runtime: the primary owns the element queue and the merge,
workers pull tiles over a framed protocol and return corrected results.

Delivery is at-least-once: tiles whose worker disappears or stalls are
re-dispatched, and because correction is deterministic, duplicate results
are byte-identical and the first one wins. Queue transitions are serialized
under a single lock and preserve the conservation invariant
|pending| + |in_flight| + |done| == total at every step.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .layout import Layout, parse_layout, write_layout
from .litho import OpticalModel
from .opc import CorrectionStats, OpcParams, run_correction
from .secure_store import LocalStore, RemoteStore, StoreMode
from .tiler import TilePlan, TileResult, plan_tiles, stitch
from .transport import (
    AuthenticationError,
    Channel,
    SecurityMode,
    TransportError,
    WorkloadCredential,
    connect,
    listen,
    parse_address,
)

log = logging.getLogger("opcvault.cluster")

MAX_FRAME_PAYLOAD = 64 * 1024 * 1024
_HEADER = struct.Struct(">IB")

MSG_HELLO = 0x01
MSG_WORK_REQ = 0x02
MSG_WORK = 0x03
MSG_RESULT = 0x04
MSG_NO_MORE_WORK = 0x05
MSG_ACK = 0x06
MSG_ERR = 0x07
_VALID_TYPES = frozenset(range(MSG_HELLO, MSG_ERR + 1))

HELLO_MAGIC = b"EDAC"
PROTOCOL_VERSION = 1

_IO_TIMEOUT = 600.0


class ClusterError(RuntimeError):
    """Protocol violation or unrecoverable run failure."""


class FrameError(ClusterError):
    """Malformed frame."""


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if msg_type not in _VALID_TYPES:
        raise FrameError(f"unknown msg_type {msg_type:#x}")
    if len(payload) > MAX_FRAME_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds 64 MiB frame limit")
    return _HEADER.pack(len(payload), msg_type) + payload


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one complete frame."""
    if len(data) < _HEADER.size:
        raise FrameError("truncated frame header")
    length, msg_type = _HEADER.unpack_from(data)
    if length > MAX_FRAME_PAYLOAD:
        raise FrameError(f"declared payload of {length} bytes exceeds 64 MiB frame limit")
    if msg_type not in _VALID_TYPES:
        raise FrameError(f"unknown msg_type {msg_type:#x}")
    if len(data) != _HEADER.size + length:
        raise FrameError("frame length does not match payload")
    return Frame(msg_type, data[_HEADER.size :])


class FrameDecoder:
    """Incremental frame decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf.extend(data)
        frames = []
        while len(self._buf) >= _HEADER.size:
            length, msg_type = _HEADER.unpack_from(self._buf)
            if length > MAX_FRAME_PAYLOAD:
                raise FrameError(f"declared payload of {length} bytes exceeds 64 MiB frame limit")
            if msg_type not in _VALID_TYPES:
                raise FrameError(f"unknown msg_type {msg_type:#x}")
            if len(self._buf) < _HEADER.size + length:
                break
            payload = bytes(self._buf[_HEADER.size : _HEADER.size + length])
            del self._buf[: _HEADER.size + length]
            frames.append(Frame(msg_type, payload))
        return frames


def _send_frame(ch: Channel, msg_type: int, payload: bytes) -> None:
    ch.send(encode_frame(msg_type, payload))


def _recv_frame(ch: Channel) -> Frame:
    head = ch.recv_exact(_HEADER.size)
    length, msg_type = _HEADER.unpack(head)
    if length > MAX_FRAME_PAYLOAD:
        raise FrameError(f"declared payload of {length} bytes exceeds 64 MiB frame limit")
    if msg_type not in _VALID_TYPES:
        raise FrameError(f"unknown msg_type {msg_type:#x}")
    return Frame(msg_type, ch.recv_exact(length) if length else b"")


_CONFIG_BLOCK = struct.Struct(">ddddIddddI")


def _encode_run_params(model: OpticalModel, params: OpcParams, frag_len: int) -> bytes:
    return _CONFIG_BLOCK.pack(
        model.sigma, model.threshold, model.cull_radius, model.search_radius,
        params.max_iter, params.epe_tol, params.gain, params.max_step,
        params.max_total_offset, frag_len,
    )


def _decode_run_params(data: bytes) -> tuple[OpticalModel, OpcParams, int]:
    if len(data) != _CONFIG_BLOCK.size:
        raise FrameError("malformed run parameter block")
    (sigma, threshold, cull, search, max_iter, epe_tol, gain, max_step,
     max_total, frag_len) = _CONFIG_BLOCK.unpack(data)
    model = OpticalModel(sigma, threshold, cull, search)
    params = OpcParams(max_iter, epe_tol, gain, max_step, max_total)
    return model, params, frag_len


_WORK_HEAD = struct.Struct(">Iiiii")
_STATS_HEAD = struct.Struct(">IBIddI")


def _encode_work(tile_id: int, core: tuple[int, int, int, int], geom: Layout) -> bytes:
    return _WORK_HEAD.pack(tile_id, *core) + write_layout(geom).encode("utf-8")


def _decode_work(payload: bytes) -> tuple[int, tuple[int, int, int, int], Layout]:
    if len(payload) < _WORK_HEAD.size:
        raise FrameError("short WORK payload")
    tile_id, x0, y0, x1, y1 = _WORK_HEAD.unpack_from(payload)
    geom = parse_layout(payload[_WORK_HEAD.size :].decode("utf-8"))
    return tile_id, (x0, y0, x1, y1), geom


def _encode_result(tile_id: int, stats: CorrectionStats, compute_seconds: float,
                   offsets: tuple[float, ...], corrected: Layout) -> bytes:
    head = struct.pack(">I", tile_id) + _STATS_HEAD.pack(
        stats.iterations, 1 if stats.converged else 0, stats.clamp_count,
        stats.final_max_epe, compute_seconds, len(offsets),
    )
    body = struct.pack(f">{len(offsets)}d", *offsets) if offsets else b""
    return head + body + write_layout(corrected).encode("utf-8")


def _decode_result(payload: bytes) -> tuple[int, CorrectionStats, float, tuple[float, ...], Layout]:
    if len(payload) < 4 + _STATS_HEAD.size:
        raise FrameError("short RESULT payload")
    (tile_id,) = struct.unpack_from(">I", payload)
    iterations, converged, clamp_count, final_epe, compute_s, n = _STATS_HEAD.unpack_from(
        payload, 4
    )
    off = 4 + _STATS_HEAD.size
    offsets = struct.unpack_from(f">{n}d", payload, off) if n else ()
    off += 8 * n
    corrected = parse_layout(payload[off:].decode("utf-8"))
    stats = CorrectionStats(iterations, final_epe, clamp_count, bool(converged))
    return tile_id, stats, compute_s, offsets, corrected


class QueueState:
    """Tile bookkeeping: pending ids, in-flight dispatches, finished results.

    The three sets stay pairwise disjoint and jointly cover every tile; a
    finished tile never leaves ``done``. All mutation happens under the
    owning server's lock.
    """

    def __init__(self, tile_ids: list[int]):
        self.pending: deque[int] = deque(tile_ids)
        self.in_flight: dict[int, tuple[int, float]] = {}  # tile -> (session, dispatched_at)
        self.done: dict[int, TileResult] = {}
        self.redispatch_count: dict[int, int] = {t: 0 for t in tile_ids}
        self.total = len(tile_ids)
        self.redispatches = 0
        self.check()

    def check(self) -> None:
        p, f, d = set(self.pending), set(self.in_flight), set(self.done)
        if len(self.pending) != len(p):
            raise ClusterError("queue invariant violated: duplicate pending tile")
        if (p & f) or (p & d) or (f & d) or len(p) + len(f) + len(d) != self.total:
            raise ClusterError("queue invariant violated: sets are not a partition")

    def dispatch(self, session_id: int, now: float) -> int | None:
        if not self.pending:
            return None
        tile = self.pending.popleft()
        self.in_flight[tile] = (session_id, now)
        self.check()
        return tile

    def finish(self, tile_id: int, result: TileResult) -> bool:
        """Record a result; False if the tile was already done (duplicate)."""
        if tile_id in self.done:
            return False
        if tile_id in self.in_flight:
            del self.in_flight[tile_id]
        else:
            try:
                self.pending.remove(tile_id)
            except ValueError:
                raise ClusterError(f"result for unknown tile {tile_id}")
        self.done[tile_id] = result
        self.check()
        return True

    def requeue(self, tile_id: int, max_redispatch: int) -> None:
        self.in_flight.pop(tile_id)
        self.redispatch_count[tile_id] += 1
        self.redispatches += 1
        if self.redispatch_count[tile_id] > max_redispatch:
            raise ClusterError(
                f"tile {tile_id} exceeded {max_redispatch} redispatches; aborting"
            )
        self.pending.appendleft(tile_id)
        self.check()

    def release_session(self, session_id: int, max_redispatch: int) -> list[int]:
        """Requeue everything a closed session still held."""
        held = [t for t, (s, _) in self.in_flight.items() if s == session_id]
        for t in held:
            self.requeue(t, max_redispatch)
        return held

    @property
    def complete(self) -> bool:
        return len(self.done) == self.total


def requeue_expired(queue: QueueState, now: float, timeout: float,
                    max_redispatch: int = 3) -> QueueState:
    """Move in-flight tiles older than ``timeout`` back to the queue front."""
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    expired = [t for t, (_, ts) in queue.in_flight.items() if now - ts > timeout]
    for t in expired:
        queue.requeue(t, max_redispatch)
    return queue


@dataclass
class RunConfig:
    """Everything a primary needs for one run. Validated at startup."""

    input_name: str = "input.lay"
    output_name: str = "output.lay"
    listen: str = "127.0.0.1:0"
    expected_workers: int = 1
    security: SecurityMode = SecurityMode.PLAIN
    credentials: WorkloadCredential | None = None
    store_mode: StoreMode = StoreMode.PASSTHROUGH
    store_root: Path | None = None
    store_addr: str | None = None
    tile_size: int = 0  # 0 means a single tile covering the layout
    frag_len: int = 48
    model: OpticalModel = field(default_factory=OpticalModel)
    params: OpcParams = field(default_factory=OpcParams)
    dispatch_timeout: float = 120.0
    max_redispatch: int = 3
    handshake_timeout: float = 60.0
    on_dispatch: Callable[[int, bytes], None] | None = None  # test instrumentation

    def validate(self) -> None:
        if self.expected_workers < 1:
            raise ClusterError("expected_workers must be at least 1")
        if self.security is SecurityMode.MUTUAL and self.credentials is None:
            raise ClusterError("mutual security requires credentials")
        if self.store_mode is StoreMode.PASSTHROUGH:
            if self.store_root is None:
                raise ClusterError("passthrough store requires store_root")
        elif self.store_addr is None:
            raise ClusterError("sidecar store modes require store_addr")
        if self.frag_len < 2:
            raise ClusterError("frag_len must be at least 2")
        if self.dispatch_timeout <= 0 or self.handshake_timeout <= 0:
            raise ClusterError("timeouts must be positive")
        parse_address(self.listen)


@dataclass(frozen=True)
class RunSummary:
    phase_seconds: dict[str, float]
    wall_seconds: float
    tiles: dict[int, CorrectionStats]
    workers_observed: int
    redispatches: int
    output_digest: str


@dataclass(frozen=True)
class WorkerSummary:
    tiles_processed: int
    compute_seconds: float


def open_store(config: RunConfig):
    if config.store_mode is StoreMode.PASSTHROUGH:
        return LocalStore(config.store_root)
    return RemoteStore(parse_address(config.store_addr))


class _PrimaryServer:
    def __init__(self, config: RunConfig, plan: TilePlan):
        self.config = config
        self.plan = plan
        self.queue = QueueState([el.tile_id for el in plan.elements])
        self.cond = threading.Condition()
        self.abort_reason: str | None = None
        self.raw_results: dict[int, bytes] = {}
        self.worker_nonces: set[bytes] = set()
        self.started = time.monotonic()
        self._session_seq = 0

    def abort(self, reason: str) -> None:
        with self.cond:
            if self.abort_reason is None:
                self.abort_reason = reason
            self.cond.notify_all()

    def monitor_tick(self) -> None:
        with self.cond:
            if self.abort_reason or self.queue.complete:
                return
            try:
                requeue_expired(self.queue, time.monotonic(), self.config.dispatch_timeout,
                                self.config.max_redispatch)
            except ClusterError as e:
                self.abort_reason = str(e)
            if (not self.worker_nonces
                    and time.monotonic() - self.started > self.config.handshake_timeout):
                self.abort_reason = (
                    f"no worker connected within {self.config.handshake_timeout:.0f}s"
                )
            self.cond.notify_all()

    def handle_session(self, ch: Channel) -> None:
        with self.cond:
            self._session_seq += 1
            session_id = self._session_seq
        nonce = b""
        try:
            frame = _recv_frame(ch)
            if frame.msg_type != MSG_HELLO or len(frame.payload) != 21 or \
                    frame.payload[:4] != HELLO_MAGIC or frame.payload[4] != PROTOCOL_VERSION:
                _send_frame(ch, MSG_ERR, b"bad handshake")
                return
            nonce = frame.payload[5:]
            with self.cond:
                self.worker_nonces.add(nonce)
            _send_frame(ch, MSG_ACK, _encode_run_params(
                self.config.model, self.config.params, self.config.frag_len))
            self._serve_loop(ch, session_id)
        except (TransportError, FrameError) as e:
            log.info("session %d ended: %s", session_id, e)
        finally:
            with self.cond:
                try:
                    self.queue.release_session(session_id, self.config.max_redispatch)
                except ClusterError as e:
                    if self.abort_reason is None:
                        self.abort_reason = str(e)
                self.cond.notify_all()
            ch.close()

    def _serve_loop(self, ch: Channel, session_id: int) -> None:
        while True:
            frame = _recv_frame(ch)
            if frame.msg_type == MSG_WORK_REQ:
                if not self._serve_work_req(ch, session_id):
                    return
            elif frame.msg_type == MSG_RESULT:
                self._accept_result(frame.payload)
                _send_frame(ch, MSG_ACK, b"")
            else:
                _send_frame(ch, MSG_ERR, f"unexpected msg_type {frame.msg_type:#x}".encode())
                return

    def _serve_work_req(self, ch: Channel, session_id: int) -> bool:
        while True:
            with self.cond:
                if self.abort_reason is not None:
                    _send_frame(ch, MSG_ERR, self.abort_reason.encode())
                    return False
                tile = self.queue.dispatch(session_id, time.monotonic())
                if tile is None and self.queue.complete:
                    _send_frame(ch, MSG_NO_MORE_WORK, b"")
                    return False
                if tile is None:
                    self.cond.wait(0.2)
                    continue
            el = self.plan.elements[tile]
            try:
                _send_frame(ch, MSG_WORK, _encode_work(el.tile_id, el.core, el.halo_geom))
            except TransportError:
                with self.cond:
                    self.queue.requeue(tile, self.config.max_redispatch)
                    self.cond.notify_all()
                raise
            if self.config.on_dispatch is not None:
                self.config.on_dispatch(tile, b"")
            return True

    def _accept_result(self, payload: bytes) -> None:
        tile_id, stats, _compute, offsets, corrected = _decode_result(payload)
        result = TileResult(tile_id, corrected, stats, offsets)
        with self.cond:
            if not self.queue.finish(tile_id, result):
                # Duplicate delivery from a redispatch race: determinism makes
                # both byte-identical; keep the first, verify the claim.
                if self.raw_results.get(tile_id) != payload:
                    self.abort_reason = f"divergent duplicate result for tile {tile_id}"
                self.cond.notify_all()
                return
            self.raw_results[tile_id] = payload
            self.cond.notify_all()


class PrimaryHandle:
    """A primary bound to its address and running in a background thread."""

    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        host, port = parse_address(config.listen)
        self.listener = listen((host, port), config.security, config.credentials)
        self.address = "%s:%d" % self.listener.address
        self._summary: RunSummary | None = None
        self._error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def result(self, timeout: float | None = None) -> RunSummary:
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise ClusterError("primary still running")
        if self._error is not None:
            raise self._error
        return self._summary

    def _run(self) -> None:
        try:
            self._summary = _primary_main(self.config, self.listener)
        except BaseException as e:  # surfaced via result()
            self._error = e
        finally:
            self.listener.close()


def _primary_main(config: RunConfig, listener) -> RunSummary:
    wall_start = time.monotonic()
    phases: dict[str, float] = {}

    t0 = time.monotonic()
    store = open_store(config)
    layout = parse_layout(store.get(config.input_name).decode("utf-8"))
    phases["read"] = time.monotonic() - t0

    t0 = time.monotonic()
    tile_size = config.tile_size
    if tile_size <= 0:
        tile_size = max(layout.bbox[2] - layout.bbox[0], layout.bbox[3] - layout.bbox[1])
    plan = plan_tiles(layout, tile_size, config.model, config.params, config.frag_len)
    phases["partition"] = time.monotonic() - t0

    t0 = time.monotonic()
    server = _PrimaryServer(config, plan)
    sessions: list[threading.Thread] = []
    last_tick = time.monotonic()
    while True:
        with server.cond:
            if server.abort_reason is not None:
                raise ClusterError(server.abort_reason)
            if server.queue.complete:
                break
        try:
            ch = listener.accept(timeout=0.2)
        except AuthenticationError as e:
            log.info("rejected peer: %s", e)
            ch = None
        except OSError:
            ch = None
        if ch is not None:
            t = threading.Thread(target=server.handle_session, args=(ch,), daemon=True)
            t.start()
            sessions.append(t)
        if time.monotonic() - last_tick >= 0.5:
            server.monitor_tick()
            last_tick = time.monotonic()
    phases["correct"] = time.monotonic() - t0

    t0 = time.monotonic()
    results = [server.queue.done[t] for t in sorted(server.queue.done)]
    merged = stitch(plan, results)
    phases["stitch"] = time.monotonic() - t0

    t0 = time.monotonic()
    out_bytes = write_layout(merged).encode("utf-8")
    store.put(config.output_name, out_bytes)
    phases["write"] = time.monotonic() - t0

    # Give connected workers a moment to drain their final NO_MORE_WORK.
    deadline = time.monotonic() + 5.0
    for t in sessions:
        t.join(timeout=max(0.0, deadline - time.monotonic()))

    return RunSummary(
        phase_seconds=phases,
        wall_seconds=time.monotonic() - wall_start,
        tiles={tid: r.stats for tid, r in server.queue.done.items()},
        workers_observed=len(server.worker_nonces),
        redispatches=server.queue.redispatches,
        output_digest=hashlib.sha256(out_bytes).hexdigest(),
    )


def start_primary(config: RunConfig) -> PrimaryHandle:
    """Bind the listener and serve in a background thread."""
    return PrimaryHandle(config)


def run_primary(config: RunConfig) -> RunSummary:
    """Run a primary to completion; see PrimaryHandle for the async form."""
    return start_primary(config).result()


def run_worker(
    primary: str,
    credentials: WorkloadCredential | None = None,
    security: SecurityMode = SecurityMode.PLAIN,
) -> WorkerSummary:
    """Pull and correct tiles until the primary reports the queue exhausted."""
    ch = connect(parse_address(primary), security, credentials, timeout=30.0)
    ch._sock.settimeout(_IO_TIMEOUT)
    tiles = 0
    compute = 0.0
    try:
        _send_frame(ch, MSG_HELLO, HELLO_MAGIC + bytes([PROTOCOL_VERSION]) + os.urandom(16))
        frame = _recv_frame(ch)
        if frame.msg_type == MSG_ERR:
            raise ClusterError(f"primary rejected handshake: {frame.payload.decode()}")
        if frame.msg_type != MSG_ACK:
            raise ClusterError(f"unexpected handshake reply {frame.msg_type:#x}")
        model, params, frag_len = _decode_run_params(frame.payload)

        while True:
            _send_frame(ch, MSG_WORK_REQ, b"")
            frame = _recv_frame(ch)
            if frame.msg_type == MSG_NO_MORE_WORK:
                break
            if frame.msg_type == MSG_ERR:
                raise ClusterError(f"primary error: {frame.payload.decode()}")
            if frame.msg_type != MSG_WORK:
                raise ClusterError(f"unexpected frame {frame.msg_type:#x}")
            tile_id, _core, geom = _decode_work(frame.payload)
            t0 = time.monotonic()
            corrected, stats, fs = run_correction(geom, model, params, frag_len)
            dt = time.monotonic() - t0
            compute += dt
            _send_frame(ch, MSG_RESULT,
                        _encode_result(tile_id, stats, dt, fs.offsets(), corrected))
            frame = _recv_frame(ch)
            if frame.msg_type != MSG_ACK:
                raise ClusterError(f"expected ACK after result, got {frame.msg_type:#x}")
            tiles += 1
    finally:
        ch.close()
    return WorkerSummary(tiles, compute)
