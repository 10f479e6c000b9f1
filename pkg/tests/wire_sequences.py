"""Random broker sequences replayed over the socket protocol and in process.

Each sequence gets its own broker daemon (server thread) with one client
connection per simulated process. Payload references are real allocations in
each client's shared-memory segment, so server-side reclaims run for real.
A process exit is a dropped connection on the wire side and a direct
``handle_process_exit`` call on the in-process side.
"""

from __future__ import annotations

import random
import time
from pathlib import Path

from pubsub_lifetimes.arena import ShmArena
from pubsub_lifetimes.broker import Broker, snapshot_bytes
from pubsub_lifetimes.proto import BrokerServer, RemoteBroker

from .refsim import RefSim, SimError
from .sequences import PIDS, apply_broker, apply_sim, choose


class WireDivergence(AssertionError):
    pass


def _outcome(fn):
    try:
        return ("ok", fn())
    except Exception as exc:
        return ("error", type(exc).__name__)


def _wait_exit(server: BrokerServer, pid: int, count: int, timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    while server.exits.get(pid, 0) < count:
        if time.monotonic() > deadline:
            raise WireDivergence(f"server never ran exit cleanup for pid {pid}")
        time.sleep(0.001)


def run_wire_sequence(seed: int, workdir: Path, prefix: str, max_messages: int = 30) -> int:
    """Returns the number of steps; raises :class:`WireDivergence` on mismatch."""
    rng = random.Random(seed)
    target = rng.randint(1, max_messages)
    local, sim = Broker(), RefSim()
    with BrokerServer(workdir / f"w{seed}.sock", f"{prefix}w{seed}x", arena_capacity=128 * 64, slot_size=64) as server:
        clients: dict[int, RemoteBroker] = {}
        arenas: dict[int, ShmArena] = {}
        detached: list[ShmArena] = []
        exits: dict[int, int] = {}

        def connect(pid: int) -> None:
            c = clients[pid] = RemoteBroker(server.path, pid=pid)
            arenas[pid] = ShmArena(c.arena_id, c.shm_prefix)

        for pid in PIDS:
            connect(pid)
        published = steps = 0
        try:
            while published < target and steps < 6 * target + 20:
                op = choose(rng, sim)
                steps += 1
                ref = None
                if op[0] == "publish":
                    owner = sim.topics.get(op[1])
                    pid = owner.pubs[op[2]][0] if owner and op[2] in owner.pubs else PIDS[0]
                    ref, view = arenas[pid].allocate(8)
                    view.release()
                try:
                    apply_sim(sim, op, ref)
                except SimError:
                    pass
                want = _outcome(lambda: apply_broker(local, op, ref))
                if op[0] == "exit":
                    pid = op[1]
                    clients[pid].close()
                    exits[pid] = exits.get(pid, 0) + 1
                    _wait_exit(server, pid, exits[pid])
                    detached.append(arenas.pop(pid))
                    connect(pid)
                    got = want if want[0] == "ok" else ("error", "")
                else:
                    c = clients[op[4]] if op[0] in ("reg_pub", "reg_sub") else clients[rng.choice(PIDS)]
                    got = _outcome(lambda: apply_broker(c, op, ref))
                if got != want:
                    raise WireDivergence(f"seed {seed} step {steps} {op}: wire {got} != local {want}")
                if op[0] == "publish":
                    if got[0] == "ok":
                        published += 1
                    else:
                        arenas[pid].reclaim(ref)
                wire = clients[PIDS[0]].snapshot_bytes()
                if wire != snapshot_bytes(local.snapshot()):
                    raise WireDivergence(f"seed {seed} step {steps} {op}: snapshots differ")
        finally:
            for pid, c in clients.items():
                c.close()
                exits[pid] = exits.get(pid, 0) + 1
            for pid in clients:
                _wait_exit(server, pid, exits[pid])
            for a in list(arenas.values()) + detached:
                a.close()
    return steps
