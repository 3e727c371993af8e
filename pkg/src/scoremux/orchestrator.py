"""Dynamic inference orchestration: task-module files, LRU registry, serving.

A TaskModule is the deployable unit for one task: adapter + head in a single
file, loaded on demand. The Registry keeps at most `capacity` modules
resident, evicting least-recently-used; modules being scored are pinned and
cannot be evicted until their in-flight requests finish. The wire protocol is
newline-delimited JSON over stdio or TCP.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass

from .adapters import LoraAdapter, adapter_from_reader, adapter_to_bytes
from .backbone import Backbone, tokenize
from .errors import (
    ContractError,
    DuplicateTaskError,
    FileFormatError,
    RegistrationError,
    ScoreMuxError,
    UnknownTaskError,
)
from .heads import ClassificationHead, predict
from .numerics import Matrix, P32, Precision
from .serialize import Reader, Writer

MODULE_MAGIC = b"MTTM"
MODULE_VERSION = 1
DEFAULT_CAPACITY = 4


@dataclass(frozen=True)
class ModuleMetadata:
    num_classes: int
    created_at: int  # unix seconds
    backbone_fingerprint: str  # fingerprint of the backbone trained against


@dataclass
class TaskModule:
    task_id: str
    adapter: LoraAdapter
    head: ClassificationHead
    metadata: ModuleMetadata

    def __post_init__(self):
        if not (self.adapter.task_id == self.head.task_id == self.task_id):
            raise ContractError(
                f"task ids disagree: module={self.task_id!r}, adapter={self.adapter.task_id!r}, "
                f"head={self.head.task_id!r}"
            )

    def param_count(self) -> int:
        return self.adapter.param_count() + self.head.param_count()

    def param_bytes(self) -> int:
        return self.adapter.param_bytes() + self.head.param_bytes()


def module_to_bytes(module: TaskModule) -> bytes:
    w = Writer(MODULE_MAGIC, MODULE_VERSION)
    adapter_blob = adapter_to_bytes(module.adapter)
    w.u32(len(adapter_blob))
    w.raw(adapter_blob)
    head = module.head
    w.u16(head.num_classes)
    w.array(head.weight.data, "<f4")
    w.array(head.bias.data, "<f4")
    w.u64(module.metadata.created_at)
    w.str16(module.metadata.backbone_fingerprint)
    return w.finish()


def save_task_module(module: TaskModule, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(module_to_bytes(module))


def load_task_module(path: str, precision: Precision = P32) -> TaskModule:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, MODULE_MAGIC, MODULE_VERSION)
    adapter_blob = r.raw(r.u32())
    ar = Reader(adapter_blob, b"MTLA", 1)
    adapter = adapter_from_reader(ar, precision)
    ar.finish()
    num_classes = r.u16()
    d_model = adapter.targets[0].d if adapter.targets else 0
    weight = r.array(num_classes * d_model, "<f4").reshape(num_classes, d_model)
    bias = r.array(num_classes, "<f4").reshape(1, num_classes)
    created_at = r.u64()
    fingerprint = r.str16()
    r.finish()
    head = ClassificationHead(
        task_id=adapter.task_id,
        num_classes=num_classes,
        weight=Matrix(weight.astype(precision.dtype)),
        bias=Matrix(bias.astype(precision.dtype)),
    )
    return TaskModule(
        task_id=adapter.task_id,
        adapter=adapter,
        head=head,
        metadata=ModuleMetadata(num_classes, created_at, fingerprint),
    )


# -- registry -------------------------------------------------------------------


@dataclass
class RegistryStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    loads: int = 0
    load_time_us: int = 0
    compute_time_us: int = 0


@dataclass(frozen=True)
class ScoreResult:
    task_id: str
    label: int
    probs: tuple[float, ...]
    cache_hit: bool
    latency_us: int
    truncated: bool = False


class Registry:
    """Manifest of task-module files with an LRU-bounded resident set."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, precision: Precision = P32):
        if capacity < 1:
            raise ContractError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.precision = precision
        self.manifest: dict[str, str] = {}
        self.stats = RegistryStats()
        self._loaded: OrderedDict[str, TaskModule] = OrderedDict()
        self._pins: dict[str, int] = {}
        self._cond = threading.Condition()

    def register(self, task_id: str, module_path: str) -> None:
        """Add a module file to the manifest; nothing is loaded yet."""
        if task_id in self.manifest:
            raise DuplicateTaskError(f"task {task_id!r} already registered")
        try:
            with open(module_path, "rb") as fh:
                header = fh.read(6)
        except OSError as exc:
            raise RegistrationError(f"cannot read {module_path}: {exc}") from exc
        if len(header) < 6 or header[:4] != MODULE_MAGIC:
            raise RegistrationError(f"{module_path}: not a task-module file")
        version = int.from_bytes(header[4:6], "little")
        if version != MODULE_VERSION:
            raise RegistrationError(f"{module_path}: unsupported version {version}")
        self.manifest[task_id] = module_path

    def loaded_ids(self) -> list[str]:
        with self._cond:
            return list(self._loaded)

    def resident_module_bytes(self) -> int:
        with self._cond:
            return sum(m.param_bytes() for m in self._loaded.values())

    def _acquire(self, task_id: str, pin: bool = False) -> tuple[TaskModule, bool]:
        """Return (module, cache_hit), loading and possibly evicting under lock."""
        with self._cond:
            if task_id not in self.manifest:
                raise UnknownTaskError(f"unknown task {task_id!r}")
            module = self._loaded.get(task_id)
            if module is not None:
                self._loaded.move_to_end(task_id)
                self.stats.hits += 1
                if pin:
                    self._pins[task_id] = self._pins.get(task_id, 0) + 1
                return module, True
            t0 = time.perf_counter_ns()
            module = load_task_module(self.manifest[task_id], self.precision)
            self.stats.load_time_us += (time.perf_counter_ns() - t0) // 1000
            while len(self._loaded) >= self.capacity and not self._evictable():
                self._cond.wait()
            while len(self._loaded) >= self.capacity:
                self._evict_one()
            self._loaded[task_id] = module
            self.stats.misses += 1
            self.stats.loads += 1
            if pin:
                self._pins[task_id] = self._pins.get(task_id, 0) + 1
            return module, False

    def _evictable(self) -> bool:
        return any(self._pins.get(tid, 0) == 0 for tid in self._loaded)

    def _evict_one(self) -> None:
        for tid in self._loaded:  # OrderedDict iterates least-recent first
            if self._pins.get(tid, 0) == 0:
                del self._loaded[tid]
                self.stats.evictions += 1
                return
        raise ContractError("no evictable module (all pinned)")

    def _unpin(self, task_id: str) -> None:
        with self._cond:
            count = self._pins.get(task_id, 0) - 1
            if count <= 0:
                self._pins.pop(task_id, None)
            else:
                self._pins[task_id] = count
            self._cond.notify_all()

    def ensure_loaded(self, task_id: str) -> TaskModule:
        module, _ = self._acquire(task_id)
        return module


def register(registry: Registry, task_id: str, module_path: str) -> Registry:
    registry.register(task_id, module_path)
    return registry


def ensure_loaded(registry: Registry, task_id: str) -> TaskModule:
    return registry.ensure_loaded(task_id)


def score(registry: Registry, backbone: Backbone, task_id: str, text: str) -> ScoreResult:
    """Three-step scoring: encode through adapter, then head probabilities."""
    if not backbone.frozen:
        raise ContractError("scoring requires a frozen backbone")
    t_start = time.perf_counter_ns()
    module, hit = registry._acquire(task_id, pin=True)
    try:
        t_compute = time.perf_counter_ns()
        tokens = tokenize(text, backbone.config)
        h = backbone.encode(tokens, module.adapter)
        label, probs = predict(module.head, h)
        now = time.perf_counter_ns()
        registry.stats.compute_time_us += (now - t_compute) // 1000
    finally:
        registry._unpin(task_id)
    return ScoreResult(
        task_id=task_id,
        label=label,
        probs=tuple(float(p) for p in probs),
        cache_hit=hit,
        latency_us=(time.perf_counter_ns() - t_start) // 1000,
        truncated=tokens.truncated,
    )


# -- registry manifest file -----------------------------------------------------


def save_registry_manifest(registry: Registry, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(sorted(registry.manifest.items())), fh, indent=2)


def load_registry_manifest(path: str, capacity: int = DEFAULT_CAPACITY, precision: Precision = P32) -> Registry:
    with open(path, "r", encoding="utf-8") as fh:
        mapping = json.load(fh)
    if not isinstance(mapping, dict):
        raise ContractError(f"{path}: registry manifest must be a JSON object")
    registry = Registry(capacity=capacity, precision=precision)
    for task_id, module_path in mapping.items():
        registry.register(task_id, module_path)
    return registry


# -- serving --------------------------------------------------------------------


def handle_request_line(registry: Registry, backbone: Backbone, line: str) -> str:
    """One JSON request record in, one JSON response record out; never raises."""
    try:
        req = json.loads(line)
    except json.JSONDecodeError:
        return json.dumps({"error": "malformed_request"})
    rid = req.get("id") if isinstance(req, dict) else None
    if not isinstance(req, dict) or not isinstance(req.get("task"), str) or not isinstance(req.get("text"), str):
        return json.dumps({"id": rid, "error": "malformed_request"})
    try:
        result = score(registry, backbone, req["task"], req["text"])
    except UnknownTaskError:
        return json.dumps({"id": rid, "error": "unknown_task"})
    except FileFormatError:
        return json.dumps({"id": rid, "error": "load_error"})
    except ScoreMuxError:
        return json.dumps({"id": rid, "error": "internal_error"})
    return json.dumps(
        {
            "id": rid,
            "task": result.task_id,
            "label": result.label,
            "probs": list(result.probs),
            "cache_hit": result.cache_hit,
            "latency_us": result.latency_us,
        }
    )


class StdioTransport:
    """Newline-delimited request/response over a pair of text streams."""

    def __init__(self, in_stream, out_stream):
        self.in_stream = in_stream
        self.out_stream = out_stream

    def run(self, handler) -> int:
        served = 0
        for line in self.in_stream:
            if not line.strip():
                continue
            self.out_stream.write(handler(line) + "\n")
            self.out_stream.flush()
            served += 1
        return served


class TcpTransport:
    """TCP listener; one handler thread per connection, responses in order."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()

    def stop(self) -> None:
        self._stop.set()
        try:
            # unblock accept() with a dummy connection
            with socket.create_connection((self.host, self.port), timeout=1):
                pass
        except OSError:
            pass

    def run(self, handler) -> int:
        served = 0
        threads = []
        try:
            while not self._stop.is_set():
                conn, _ = self._sock.accept()
                if self._stop.is_set():
                    conn.close()
                    break
                t = threading.Thread(target=self._serve_conn, args=(conn, handler), daemon=True)
                t.start()
                threads.append(t)
        finally:
            for t in threads:
                t.join(timeout=5)
            self._sock.close()
        return served

    @staticmethod
    def _serve_conn(conn: socket.socket, handler) -> None:
        with conn, conn.makefile("rw", encoding="utf-8", newline="\n") as stream:
            for line in stream:
                if not line.strip():
                    continue
                stream.write(handler(line) + "\n")
                stream.flush()


def serve(registry: Registry, backbone: Backbone, transport) -> int:
    """Run the request loop until the transport's input is exhausted/stopped."""
    if not registry.manifest:
        raise ContractError("serve requires a populated registry")
    return transport.run(lambda line: handle_request_line(registry, backbone, line))
