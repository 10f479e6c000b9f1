"""Latency harness: one actor per endpoint, timestamps from CLOCK_MONOTONIC.

Actors are threads for the ``inproc`` backend and processes (talking to a
broker daemon over its socket) for ``shm``. Every publisher writes the
start-of-publish timestamp into the first 8 bytes of its payload, so a
subscriber computes end-to-end latency without any clock agreement beyond
the shared monotonic clock.

Metrics, per sample:

* ``Publish``: ``loan()`` through ``publish()`` return, notifications included.
* ``Receive``: one ``take()`` call that returned at least one message.
* ``E2E``: time the subscriber starts handling a message minus the
  embedded start-of-publish timestamp.
"""

from __future__ import annotations

import multiprocessing as mp
import os
import queue as queue_mod
import shutil
import struct
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable

from ..broker import GlobalUpdateCounters, QoS
from ..errors import CapacityExceeded, SpawnFailure, Timeout
from ..handle import Domain
from ..notify import Mode
from .config import SweepConfig

PUBLISH, RECEIVE, E2E = "Publish", "Receive", "E2E"
METRICS = (PUBLISH, RECEIVE, E2E)

PUB_DEPTH = 32  # enough history that a slow subscriber never misses an entry
_STAMP = struct.Struct("<Q")
_WAIT_SLICE = 0.05
_DRAIN_TIMEOUT = 5.0
_SPAWN_TIMEOUT = 60.0


def now_ns() -> int:
    return time.clock_gettime_ns(time.CLOCK_MONOTONIC)


SPIN_NS = 1_000_000  # busy-wait the last stretch before each publish for exact pacing


def _sleep_until(deadline_ns: int) -> None:
    delay = deadline_ns - now_ns() - SPIN_NS
    if delay > 0:
        time.sleep(delay / 1e9)
    while now_ns() < deadline_ns:
        pass


@dataclass(frozen=True)
class LatencySample:
    metric: str
    mode: str
    backend: str
    T: int
    S: int
    R: float
    iteration: int
    process: str
    value_us: float
    t_publish: int  # ns; for Receive samples, the start of the call
    t_receive: int  # ns; end of the measured interval


@dataclass
class RunResult:
    config: SweepConfig
    samples: list[LatencySample] = field(default_factory=list)
    published: int = 0  # every publish, warmup included
    delivered: int = 0  # every (entry, subscriber) delivery
    missing: int = 0
    duplicates: int = 0
    notify_calls: int = 0
    counters: GlobalUpdateCounters = field(default_factory=GlobalUpdateCounters)
    capacity: float | None = None

    def values(self, metric: str) -> list[float]:
        return [s.value_us for s in self.samples if s.metric == metric]


# --------------------------------------------------------------------------
# actor bodies (shared by both backends)


@dataclass
class _PubLog:
    name: str
    topic: int
    records: list = field(default_factory=list)  # (entry_id, t_loan, t_publish, t_done)
    notify_calls: int = 0


@dataclass
class _SubLog:
    name: str
    topic: int
    received: list = field(default_factory=list)  # (entry_id, t_publish, t_receive)
    receives: list = field(default_factory=list)  # (t_start, t_end)


def _publisher_loop(pub, log: _PubLog, start_ns: int, stop_ns: int, period_ns: int, count: int | None) -> None:
    k = 0
    deadline = start_ns
    while (count is None or k < count) and (count is not None or deadline < stop_ns):
        _sleep_until(deadline)
        t_loan = now_ns()
        h = pub.loan()
        view = h.access()
        view[8:16] = k.to_bytes(8, "little")  # payload construction
        t_pub = now_ns()
        _STAMP.pack_into(view, 0, t_pub)
        view.release()
        receipt = h._owner.publish(h)
        t_done = now_ns()
        log.records.append((receipt.entry_id, t_loan, t_pub, t_done))
        k += 1
        deadline += period_ns
    log.notify_calls = pub.notify_calls


def _drain(sub, log: _SubLog) -> int:
    t0 = now_ns()
    handles = sub.take()
    t1 = now_ns()
    if not handles:
        return 0
    log.receives.append((t0, t1))
    for h in handles:
        view = h.access()
        (t_pub,) = _STAMP.unpack_from(view, 0)
        view.release()
        log.received.append((h.entry_id, t_pub, t1))
        h.drop()
    return len(handles)


def _subscriber_loop(sub, log: _SubLog, mode: Mode, interval: float, done: Callable[[int], bool]) -> None:
    got = 0
    while not done(got):
        if mode is Mode.POLL:
            time.sleep(interval)
        else:
            try:
                sub.node.wait([sub], timeout=_WAIT_SLICE)
            except Timeout:
                continue
        got += _drain(sub, log)


# --------------------------------------------------------------------------
# turning logs into samples


def _collect(cfg: SweepConfig, iteration: int, pubs: list[_PubLog], subs: list[_SubLog], measure_ns: int, out: RunResult):
    common = dict(mode=cfg.mode_name, backend=cfg.backend, T=cfg.T, S=cfg.S, R=cfg.rate_hz, iteration=iteration)
    published: dict[int, set[int]] = {}
    for log in pubs:
        published[log.topic] = {r[0] for r in log.records}
        out.published += len(log.records)
        out.notify_calls += log.notify_calls
        for eid, t_loan, t_pub, t_done in log.records:
            if t_pub >= measure_ns:
                out.samples.append(LatencySample(PUBLISH, process=log.name, value_us=(t_done - t_loan) / 1e3,
                                                 t_publish=t_loan, t_receive=t_done, **common))
    for log in subs:
        ids = [r[0] for r in log.received]
        out.delivered += len(ids)
        out.duplicates += len(ids) - len(set(ids))
        out.missing += len(published[log.topic] - set(ids))
        for t0, t1 in log.receives:
            if t0 >= measure_ns:
                out.samples.append(LatencySample(RECEIVE, process=log.name, value_us=(t1 - t0) / 1e3,
                                                 t_publish=t0, t_receive=t1, **common))
        for eid, t_pub, t_recv in log.received:
            if t_pub >= measure_ns:
                out.samples.append(LatencySample(E2E, process=log.name, value_us=(t_recv - t_pub) / 1e3,
                                                 t_publish=t_pub, t_receive=t_recv, **common))


def _schedule(cfg: SweepConfig) -> tuple[int, int, int]:
    period = int(1e9 / cfg.rate_hz)
    warm = int(cfg.warmup * 1e9)
    span = int((cfg.warmup + cfg.duration) * 1e9)
    return period, warm, span


def _phase(t: int, cfg: SweepConfig, period: int) -> int:
    # spread topics evenly over one period instead of publishing in lockstep
    return t * period // cfg.T


# --------------------------------------------------------------------------
# inproc backend


def _run_inproc(cfg: SweepConfig, iteration: int, out: RunResult) -> None:
    period, warm, span = _schedule(cfg)
    slot = (cfg.message_size + 7) & ~7
    domain = Domain(arena_capacity=slot * (PUB_DEPTH + 32))
    pubs, subs, threads = [], [], []
    final: dict[int, int] = {}
    stop = threading.Event()

    endpoints = []
    for t in range(cfg.T):
        topic = f"bench/{t}"
        pub = domain.node().create_publisher(topic, QoS.volatile(PUB_DEPTH), cfg.message_size)
        readers = [domain.node(arena_capacity=8).create_subscriber(topic, QoS.volatile()) for _ in range(cfg.S)]
        endpoints.append((t, pub, readers))

    for t, pub, readers in endpoints:
        for j, sub in enumerate(readers):
            log = _SubLog(f"sub{t}.{j}", t)
            subs.append(log)

            def done(got, t=t):
                return stop.is_set() or (t in final and got >= final[t])

            threads.append(threading.Thread(target=_subscriber_loop, args=(sub, log, cfg.mode.mode, cfg.mode.poll_interval, done), daemon=True))
    for th in threads:
        th.start()

    start = now_ns() + 20_000_000
    pub_threads = []
    for t, pub, _ in endpoints:
        log = _PubLog(f"pub{t}", t)
        pubs.append(log)

        def body(pub=pub, log=log, t=t):
            _publisher_loop(pub, log, start + _phase(t, cfg, period), start + span, period, cfg.count)
            final[t] = len(log.records)

        pub_threads.append(threading.Thread(target=body, daemon=True))
    for th in pub_threads:
        th.start()
    for th in pub_threads:
        th.join()
    deadline = time.monotonic() + _DRAIN_TIMEOUT
    for th in threads:
        th.join(max(0.0, deadline - time.monotonic()))
    stop.set()
    for th in threads:
        th.join()
    _collect(cfg, iteration, pubs, subs, start + warm, out)
    out.counters.add(domain.broker.counters())


# --------------------------------------------------------------------------
# shm backend: each endpoint in its own process, broker daemon in this one


def _shm_publisher(path, t, cfg, start, ready, go, final, release, out_q):
    from ..proto.client import connect

    try:
        node = connect(path)
        pub = node.create_publisher(f"bench/{t}", QoS.volatile(PUB_DEPTH), cfg.message_size)
        ready.put(("pub", t, os.getpid()))
        go.wait()
        period, warm, span = _schedule(cfg)
        log = _PubLog(f"pub{t}", t)
        _publisher_loop(pub, log, start.value + _phase(t, cfg, period), start.value + span, period, cfg.count)
        final.value = len(log.records)
        out_q.put(("pub", log))
        release.wait()  # leaving earlier would evict entries not yet received
        node.close()
    except BaseException as exc:  # report instead of dying silently
        ready.put(("error", t, repr(exc)))
        raise


def _shm_subscriber(path, t, j, cfg, ready, final, stop, out_q):
    from ..proto.client import connect

    try:
        node = connect(path)
        sub = node.create_subscriber(f"bench/{t}", QoS.volatile())
        ready.put(("sub", t, os.getpid()))
        log = _SubLog(f"sub{t}.{j}", t)

        def done(got):
            return stop.is_set() or (final.value >= 0 and got >= final.value)

        _subscriber_loop(sub, log, cfg.mode.mode, cfg.mode.poll_interval, done)
        out_q.put(("sub", log))
        for s in node.subscribers:
            s.close()
        node.close()
    except BaseException as exc:
        ready.put(("error", t, repr(exc)))
        raise


def _run_shm(cfg: SweepConfig, iteration: int, out: RunResult) -> None:
    from ..proto.server import BrokerServer

    ctx = mp.get_context("spawn")
    workdir = tempfile.mkdtemp(prefix="pslbench")
    path = os.path.join(workdir, "broker.sock")
    slot = max(1024, (cfg.message_size + 7) & ~7)
    server = BrokerServer(path, f"pslb{os.getpid()}x{uuid.uuid4().hex[:6]}", slot * (PUB_DEPTH + 32), slot).start()
    ready, out_q = ctx.Queue(), ctx.Queue()
    go, stop, release = ctx.Event(), ctx.Event(), ctx.Event()
    start = ctx.Value("q", 0)
    finals = [ctx.Value("q", -1) for _ in range(cfg.T)]
    procs = []
    try:
        for t in range(cfg.T):
            for j in range(cfg.S):
                procs.append(ctx.Process(target=_shm_subscriber, args=(path, t, j, cfg, ready, finals[t], stop, out_q), daemon=True))
        for t in range(cfg.T):
            procs.append(ctx.Process(target=_shm_publisher, args=(path, t, cfg, start, ready, go, finals[t], release, out_q), daemon=True))
        try:
            for p in procs:
                p.start()
        except OSError as exc:
            raise SpawnFailure(f"cannot start actor process: {exc}") from exc
        for _ in procs:
            try:
                msg = ready.get(timeout=_SPAWN_TIMEOUT)
            except queue_mod.Empty:
                raise SpawnFailure("actors did not become ready in time") from None
            if msg[0] == "error":
                raise SpawnFailure(f"actor for topic {msg[1]} failed: {msg[2]}")
        start.value = now_ns() + 50_000_000
        go.set()

        logs_pub, logs_sub = [], []
        deadline = time.monotonic() + cfg.warmup + cfg.duration + _DRAIN_TIMEOUT + _SPAWN_TIMEOUT
        while len(logs_pub) + len(logs_sub) < len(procs):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                stop.set()
                remaining = _DRAIN_TIMEOUT
            try:
                kind, log = out_q.get(timeout=remaining)
            except queue_mod.Empty:
                raise SpawnFailure("actors stopped reporting") from None
            (logs_pub if kind == "pub" else logs_sub).append(log)
            if len(logs_sub) == cfg.T * cfg.S:
                release.set()
        release.set()
        for p in procs:
            p.join(10)
        _collect(cfg, iteration, logs_pub, logs_sub, start.value + int(cfg.warmup * 1e9), out)
        out.counters.add(server.broker.counters())
    finally:
        stop.set()
        release.set()
        for p in procs:
            if p.is_alive():
                p.kill()
        server.close()
        shutil.rmtree(workdir, ignore_errors=True)


# --------------------------------------------------------------------------
# capacity probe


_PROBE_DEPTH = 4096  # deep history so bursts are measured as backlog, not loss
_capacity_cache: dict[tuple[str, str], float] = {}


def _burst(cfg_rate: float, window: float, make_pair) -> float:
    """Publish at ``cfg_rate`` for ``window`` seconds; return delivered events/s."""
    pub, sub, cleanup = make_pair()
    received, last = [0], [0.0]
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            try:
                sub.node.wait([sub], timeout=_WAIT_SLICE)
            except Timeout:
                continue
            for h in sub.take():
                h.drop()
                received[0] += 1
            last[0] = time.perf_counter()

    th = threading.Thread(target=reader, daemon=True)
    th.start()
    t0 = time.perf_counter()
    sent = 0
    while (elapsed := time.perf_counter() - t0) < window:
        due = int(cfg_rate * elapsed) - sent
        for _ in range(max(due, 0)):
            h = pub.loan()
            h._owner.publish(h)
            sent += 1
        time.sleep(0.0005)
    elapsed = time.perf_counter() - t0
    drain_until = time.perf_counter() + 0.5
    while received[0] < sent and time.perf_counter() < drain_until:
        time.sleep(0.005)
    stop.set()
    th.join()
    cleanup()
    # time until the last delivery, so a backlog counts against the rate
    return received[0] / max(elapsed, last[0] - t0)


def probe_capacity(backend: str = "inproc", window: float = 0.3, start_rate: float = 2000.0, max_rate: float = 1e6) -> float:
    """Delivered-events/s capacity from a 1-topic 1-subscriber saturation ramp.

    The offered rate doubles until delivery falls below 90% of it; the
    capacity is the best delivered rate seen. Results are cached per backend.
    """
    key = (backend, "event")
    if key in _capacity_cache:
        return _capacity_cache[key]

    if backend == "inproc":
        def make_pair():
            d = Domain(arena_capacity=64 * (_PROBE_DEPTH + 64))
            p = d.node().create_publisher("probe", QoS.volatile(_PROBE_DEPTH), 64)
            s = d.node(arena_capacity=8).create_subscriber("probe")
            return p, s, lambda: None
    else:
        from ..proto.client import connect
        from ..proto.server import BrokerServer

        def make_pair():
            workdir = tempfile.mkdtemp(prefix="pslprobe")
            server = BrokerServer(os.path.join(workdir, "b.sock"), f"pslp{os.getpid()}x{uuid.uuid4().hex[:6]}",
                                  arena_capacity=64 * (_PROBE_DEPTH + 64), slot_size=64).start()
            pn, sn = connect(server.path, pid=1), connect(server.path, pid=2)
            p = pn.create_publisher("probe", QoS.volatile(_PROBE_DEPTH), 64)
            s = sn.create_subscriber("probe")

            def cleanup():
                s.close()
                sn.close()
                pn.close()
                server.close()
                shutil.rmtree(workdir, ignore_errors=True)

            return p, s, cleanup

    best, rate = 0.0, start_rate
    while rate <= max_rate:
        got = _burst(rate, window, make_pair)
        best = max(best, got)
        if got < 0.9 * rate:
            break
        rate *= 2
    _capacity_cache[key] = best
    return best


def check_capacity(cfg: SweepConfig) -> float:
    capacity = cfg.capacity if cfg.capacity is not None else probe_capacity(cfg.backend)
    limit = cfg.utilization_cap * capacity
    if cfg.events_per_sec > limit:
        raise CapacityExceeded(
            f"T*S*R = {cfg.events_per_sec:.0f} events/s exceeds {cfg.utilization_cap:.0%} "
            f"of measured capacity {capacity:.0f} events/s"
        )
    return capacity


def run_config(cfg: SweepConfig) -> RunResult:
    """Run every iteration of one configuration and pool the samples."""
    capacity = check_capacity(cfg)
    result = RunResult(cfg, capacity=capacity)
    runner = _run_inproc if cfg.backend == "inproc" else _run_shm
    for it in range(cfg.iterations):
        runner(cfg, it, result)
    return result
