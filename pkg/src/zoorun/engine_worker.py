"""Process-isolated engine execution over a framed pipe protocol.

Frame layout (all integers little-endian u32)::

    length | "ZRF1" | header_len | header (compact JSON) | tensor blocks...

``length`` counts every byte after itself. The header is
``{"op": ..., "request_id": n, "meta": {..., "tensor_count": k}}`` and is
followed by exactly ``k`` tensor blocks in the ZRT1 block encoding.

Each :class:`ModelSession` owns one child process that hosts one engine and
one model. The parent talks to it over the child's stdin/stdout; a reader
thread pairs responses to requests by ``request_id``.
"""

from __future__ import annotations

import atexit
import itertools
import json
import logging
import os
import struct
import subprocess
import sys
import threading
import time
from collections import deque
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from pathlib import Path
from typing import BinaryIO, Optional, Sequence

from .errors import (
    ChecksumMismatch,
    InferenceError,
    LoadError,
    ProtocolError,
    SessionClosed,
    WorkerCrashed,
    WorkerSpawnError,
    WorkerTimeout,
    ZoorunError,
)
from .fetch import sha256_file
from .model_spec import DESCRIPTOR_NAME, ModelDescriptor, load_descriptor
from .ndtensor import Tensor, decode_tensor_block, encode_tensor_block

log = logging.getLogger(__name__)

FRAME_MAGIC = b"ZRF1"
MAX_FRAME = 1 << 31
_U32 = struct.Struct("<I")

LOAD_TIMEOUT = 30.0
RUN_TIMEOUT = 300.0
CLOSE_GRACE = 2.0


# -- framing ------------------------------------------------------------------

def encode_frame(header: dict, tensors: Sequence[Tensor] = ()) -> bytes:
    if not isinstance(header, dict) or not isinstance(header.get("op"), str):
        raise ProtocolError("frame header needs a string 'op'")
    header = dict(header)
    header.setdefault("request_id", 0)
    meta = dict(header.get("meta") or {})
    meta["tensor_count"] = len(tensors)
    header["meta"] = meta
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    body = [FRAME_MAGIC, _U32.pack(len(head)), head]
    body.extend(encode_tensor_block(t) for t in tensors)
    payload = b"".join(body)
    if len(payload) >= MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds the protocol limit")
    return _U32.pack(len(payload)) + payload


def decode_body(body) -> tuple[dict, list[Tensor]]:
    """Decode everything after the length prefix."""
    view = memoryview(body)
    if len(view) < 8:
        raise ProtocolError("truncated frame header")
    if bytes(view[:4]) != FRAME_MAGIC:
        raise ProtocolError("bad frame magic")
    (hlen,) = _U32.unpack_from(view, 4)
    if 8 + hlen > len(view):
        raise ProtocolError("truncated frame header")
    try:
        header = json.loads(bytes(view[8:8 + hlen]))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"frame header is not JSON: {exc}") from None
    if (
        not isinstance(header, dict)
        or not isinstance(header.get("op"), str)
        or not isinstance(header.get("request_id"), int)
        or not isinstance(header.get("meta"), dict)
    ):
        raise ProtocolError("frame header needs op, request_id and meta")
    count = header["meta"].get("tensor_count")
    if not isinstance(count, int) or count < 0:
        raise ProtocolError("frame header lacks a valid meta.tensor_count")
    offset = 8 + hlen
    tensors = []
    for _ in range(count):
        t, offset = decode_tensor_block(view, offset, error=ProtocolError)
        tensors.append(t)
    if offset != len(view):
        raise ProtocolError(f"frame length mismatch: {len(view) - offset} unexpected trailing bytes")
    return header, tensors


def decode_frame(frame) -> tuple[dict, list[Tensor]]:
    view = memoryview(frame)
    if len(view) < 4:
        raise ProtocolError("truncated length prefix")
    (length,) = _U32.unpack_from(view, 0)
    if length != len(view) - 4:
        raise ProtocolError(f"length prefix says {length} bytes, frame has {len(view) - 4}")
    return decode_body(view[4:])


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks, need = [], n
    while need:
        chunk = stream.read(need)
        if not chunk:
            break
        chunks.append(chunk)
        need -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> Optional[tuple[dict, list[Tensor]]]:
    """Read one frame; ``None`` on a clean end of stream between frames."""
    prefix = _read_exact(stream, 4)
    if not prefix:
        return None
    if len(prefix) < 4:
        raise ProtocolError("stream ended inside a length prefix")
    (length,) = _U32.unpack(prefix)
    if length >= MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds the protocol limit")
    body = _read_exact(stream, length)
    if len(body) < length:
        raise ProtocolError(f"stream ended after {len(body)} of {length} frame bytes")
    return decode_body(body)


def write_frame(stream: BinaryIO, header: dict, tensors: Sequence[Tensor] = ()) -> None:
    stream.write(encode_frame(header, tensors))
    stream.flush()


# -- worker side --------------------------------------------------------------

class UnavailableBackend:
    """Adapter seam for native frameworks that are not bundled."""

    def __init__(self, framework: str):
        self.framework = framework

    def load(self, weights_path):
        raise RuntimeError(f"the {self.framework} runtime is not available in this build")

    def run(self, tensors):
        raise RuntimeError("no model loaded")


def _backend(framework: str):
    if framework == "reference":
        from .reference_engine import ReferenceBackend
        return ReferenceBackend()
    return UnavailableBackend(framework)


def serve(stdin: BinaryIO, stdout: BinaryIO, framework: str, version: str) -> int:
    """Worker request loop. Returns the process exit status."""
    backend = _backend(framework)
    delay = float(os.environ.get("ZOORUN_WORKER_RUN_DELAY", "0") or 0)  # test hook
    while True:
        try:
            frame = read_frame(stdin)
        except ProtocolError as exc:
            log.error("protocol error from parent: %s", exc)
            return 2
        if frame is None:
            return 0
        header, tensors = frame
        op, rid = header["op"], header["request_id"]
        reply = {"request_id": rid, "meta": {}}
        out: list[Tensor] = []
        try:
            if op == "PING":
                reply["op"] = "PONG"
                reply["meta"] = {"framework": framework, "version": version, "pid": os.getpid()}
            elif op == "LOAD":
                info = backend.load(header["meta"]["weights"])
                reply["op"] = "ACK"
                reply["meta"] = dict(info, framework=framework, version=version)
            elif op == "RUN":
                if delay:
                    time.sleep(delay)
                out = backend.run(tensors)
                reply["op"] = "RESULT"
            elif op == "CLOSE":
                write_frame(stdout, dict(reply, op="ACK"))
                return 0
            else:
                raise ValueError(f"unknown op {op!r}")
        except Exception as exc:  # every failure becomes a NACK, never a dead worker
            reply = {"op": "NACK", "request_id": rid, "meta": {"error": f"{type(exc).__name__}: {exc}"}}
            out = []
        write_frame(stdout, reply, out)


def main(argv: Sequence[str], framework: str, version: str) -> int:
    """Entry point used by an installed engine's ``worker.py``."""
    if "--serve" not in argv:
        print(f"{framework} {version} engine worker; run with --serve", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    stdin, stdout = sys.stdin.buffer, sys.stdout.buffer
    # keep stray prints from corrupting the frame stream
    sys.stdout = sys.stderr
    return serve(stdin, stdout, framework, version)


# -- parent side --------------------------------------------------------------

LOADED, CLOSED, CRASHED = "Loaded", "Closed", "Crashed"

_registry_lock = threading.Lock()
_sessions: dict[int, "ModelSession"] = {}
_session_ids = itertools.count(1)


def active_sessions() -> list["ModelSession"]:
    with _registry_lock:
        return list(_sessions.values())


@atexit.register
def _close_all():
    for s in active_sessions():
        s.close()


def _package_root() -> str:
    return str(Path(__file__).resolve().parent.parent)


class ModelSession:
    """A loaded model inside its own worker process.

    Use :func:`open_session` to create one. Sessions are safe to hand between
    threads; RUN requests on one session are serialized.
    """

    def __init__(self, engine, model_dir: Path, weights_tag: str, descriptor: ModelDescriptor,
                 proc: subprocess.Popen, run_timeout: float, close_grace: float):
        self.session_id = next(_session_ids)
        self.engine = engine
        self.model_dir = model_dir
        self.weights_tag = weights_tag
        self.descriptor = descriptor
        self.worker = proc
        self.state = LOADED
        self.run_timeout = run_timeout
        self.close_grace = close_grace
        self._write_lock = threading.Lock()
        self._run_lock = threading.Lock()
        self._pending: dict[int, Future] = {}
        self._pending_lock = threading.Lock()
        self._request_ids = itertools.count(1)
        self._stderr_tail: deque = deque(maxlen=50)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._stderr_reader = threading.Thread(target=self._drain_stderr, daemon=True)

    def _start(self):
        self._reader.start()
        self._stderr_reader.start()
        with _registry_lock:
            _sessions[self.session_id] = self

    def __repr__(self):
        return f"<ModelSession {self.session_id} {self.engine.spec.label} {self.state}>"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def stderr_tail(self) -> str:
        return "".join(self._stderr_tail)

    # reader threads

    def _drain_stderr(self):
        for line in iter(self.worker.stderr.readline, b""):
            self._stderr_tail.append(line.decode(errors="replace"))

    def _read_loop(self):
        error: Exception
        try:
            while True:
                frame = read_frame(self.worker.stdout)
                if frame is None:
                    error = WorkerCrashed(f"worker exited (status {self.worker.poll()})")
                    break
                header, tensors = frame
                with self._pending_lock:
                    fut = self._pending.pop(header["request_id"], None)
                if fut is None:
                    if header["request_id"] == 0:  # reply to CLOSE
                        continue
                    log.warning("unsolicited %s frame with request_id %s", header["op"], header["request_id"])
                    continue
                fut.set_result((header, tensors))
        except ProtocolError as exc:
            error = WorkerCrashed(f"worker stream broke: {exc}")
        except (OSError, ValueError) as exc:
            error = WorkerCrashed(f"worker stream failed: {exc}")
        if self.state == LOADED:
            self.state = CRASHED
        with self._pending_lock:
            pending, self._pending = self._pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(error)

    # requests

    def submit(self, op: str, tensors: Sequence[Tensor] = (), meta: Optional[dict] = None) -> Future:
        """Send one request; the future resolves to (header, tensors)."""
        if self.state == CLOSED:
            raise SessionClosed(f"session {self.session_id} is closed")
        if self.state == CRASHED:
            raise WorkerCrashed(f"session {self.session_id} worker has crashed")
        rid = next(self._request_ids)
        fut: Future = Future()
        with self._pending_lock:
            self._pending[rid] = fut
        frame = encode_frame({"op": op, "request_id": rid, "meta": meta or {}}, tensors)
        try:
            with self._write_lock:
                self.worker.stdin.write(frame)
                self.worker.stdin.flush()
        except (OSError, ValueError):
            with self._pending_lock:
                self._pending.pop(rid, None)
            self.state = CRASHED
            raise WorkerCrashed(f"session {self.session_id}: worker pipe closed") from None
        return fut

    def _wait(self, fut: Future, timeout: float, what: str):
        try:
            header, tensors = fut.result(timeout=timeout)
        except FutureTimeout:
            raise WorkerTimeout(f"{what} timed out after {timeout:g} s") from None
        except WorkerCrashed as exc:
            tail = self.stderr_tail.strip().splitlines()[-3:]
            raise WorkerCrashed(f"{exc}{': ' + ' | '.join(tail) if tail else ''}") from None
        return header, tensors

    def request(self, op: str, tensors: Sequence[Tensor] = (), meta=None, timeout=None):
        fut = self.submit(op, tensors, meta)
        return self._wait(fut, self.run_timeout if timeout is None else timeout, op)

    def run(self, inputs: Sequence[Tensor]) -> list[Tensor]:
        """Run inference; outputs come back in descriptor order."""
        specs = self.descriptor.inputs
        if len(inputs) != len(specs):
            raise InferenceError(f"model takes {len(specs)} inputs, got {len(inputs)}")
        for t, spec in zip(inputs, specs):
            if t.axes != spec.axes or t.dtype != spec.data_type:
                raise InferenceError(
                    f"input {spec.name!r} expects axes {spec.axes!r} {spec.data_type.value}, "
                    f"got {t.axes!r} {t.dtype.value}"
                )
        named = [t if t.name == s.name else t.renamed(s.name) for t, s in zip(inputs, specs)]
        with self._run_lock:
            header, tensors = self.request("RUN", named)
        if header["op"] == "NACK":
            raise InferenceError(header["meta"].get("error", "inference failed"))
        if header["op"] != "RESULT":
            raise ProtocolError(f"unexpected reply {header['op']!r} to RUN")
        outputs = self.descriptor.outputs
        by_name = {t.name: t for t in tensors}
        if all(o.name in by_name for o in outputs):
            return [by_name[o.name] for o in outputs]
        # engine-side names differ: fall back to declaration order
        if len(tensors) != len(outputs):
            raise InferenceError(f"engine returned {len(tensors)} outputs, model declares {len(outputs)}")
        return [t.renamed(o.name) for t, o in zip(tensors, outputs)]

    def ping(self, timeout: float = 5.0) -> dict:
        header, _ = self.request("PING", timeout=timeout)
        return header["meta"]

    def close(self) -> None:
        """Ask the worker to exit, then make sure it does. Idempotent."""
        with _registry_lock:
            _sessions.pop(self.session_id, None)
        if self.state == CLOSED:
            return
        was_loaded = self.state == LOADED
        self.state = CLOSED
        proc = self.worker
        if was_loaded and proc.poll() is None:
            try:
                with self._write_lock:
                    proc.stdin.write(encode_frame({"op": "CLOSE", "request_id": 0}))
                    proc.stdin.flush()
            except (OSError, ValueError):
                pass
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=self.close_grace)
        except subprocess.TimeoutExpired:
            proc.terminate()
            try:
                proc.wait(timeout=self.close_grace)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self._reader.join(timeout=self.close_grace)


def _worker_env(engine) -> dict:
    env = dict(os.environ)
    paths = [str(Path(engine.root_dir).resolve()), _package_root()]
    if env.get("PYTHONPATH"):
        paths.append(env["PYTHONPATH"])
    env["PYTHONPATH"] = os.pathsep.join(paths)
    return env


def open_session(
    engine,
    model_dir,
    weights_tag: str,
    *,
    load_timeout: float = LOAD_TIMEOUT,
    run_timeout: float = RUN_TIMEOUT,
    close_grace: float = CLOSE_GRACE,
    env: Optional[dict] = None,
) -> ModelSession:
    """Spawn a worker for ``engine`` and load the model's ``weights_tag`` weights."""
    model_dir = Path(model_dir)
    descriptor = load_descriptor(model_dir / DESCRIPTOR_NAME)
    try:
        weights = descriptor.weights_for(weights_tag)
    except KeyError:
        raise LoadError(f"model {descriptor.name!r} has no {weights_tag} weights") from None
    weights_path = (model_dir / weights.source).resolve()
    if not weights_path.is_file():
        raise LoadError(f"weights file {weights.source} is missing from {model_dir}")
    digest = sha256_file(weights_path)
    if digest != weights.sha256:
        raise ChecksumMismatch(f"weights {weights.source}", weights.sha256, digest)
    worker = engine.worker_path.resolve()
    if not worker.is_file():
        raise WorkerSpawnError(f"engine {engine.spec.label} has no worker entry point ({worker.name})")

    proc_env = _worker_env(engine)
    if env:
        proc_env.update(env)
    try:
        proc = subprocess.Popen(
            [sys.executable, str(worker), "--serve"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            cwd=str(worker.parent),
            env=proc_env,
        )
    except OSError as exc:
        raise WorkerSpawnError(f"cannot start worker for {engine.spec.label}: {exc}") from None

    session = ModelSession(engine, model_dir, weights_tag, descriptor, proc, run_timeout, close_grace)
    session._start()
    try:
        header, _ = session.request("LOAD", meta={"weights": str(weights_path), "tag": weights_tag},
                                    timeout=load_timeout)
    except WorkerCrashed as exc:
        session.close()
        raise WorkerSpawnError(f"worker for {engine.spec.label} died during load: {exc}") from None
    except ZoorunError:
        session.close()
        raise
    if header["op"] != "ACK":
        session.close()
        raise LoadError(header["meta"].get("error", "worker refused to load the model"))
    return session


def close_session(session: ModelSession) -> None:
    session.close()
