"""Sweep definitions and per-run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..notify import DeliveryMode, Mode

DEFAULT_UTILIZATION_CAP = 0.6

# desk-scale grids; the paper-scale ones cover the full published ranges
DESK = {
    "A": {"T": [1, 5, 10, 25, 50], "S": [2]},
    "B": {"T": [10], "S": [1, 2, 4, 8, 16]},
    "C": {"T": [5, 10, 25], "S": [2, 4, 8]},
}
FULL = {
    "A": {"T": [1, 10, 25, 50, 100, 150, 200], "S": [2]},
    "B": {"T": [10], "S": [1, 2, 4, 8, 16, 32]},
    "C": {"T": [10, 25, 50, 100], "S": [2, 4, 8, 16]},
}
DESK_TIMING = {"duration": 3.0, "warmup": 1.0, "iterations": 3}
FULL_TIMING = {"duration": 10.0, "warmup": 2.0, "iterations": 5}


@dataclass(frozen=True)
class SweepConfig:
    sweep: str = "custom"
    topics: int = 1
    subscribers_per_topic: int = 1
    rate_hz: float = 100.0
    duration: float = DESK_TIMING["duration"]
    warmup: float = DESK_TIMING["warmup"]
    iterations: int = DESK_TIMING["iterations"]
    mode: DeliveryMode = field(default_factory=DeliveryMode)
    backend: str = "inproc"
    utilization_cap: float = DEFAULT_UTILIZATION_CAP
    message_size: int = 1024
    capacity: float | None = None  # events/s; probed on the host when None
    count: int | None = None  # publish exactly this many per publisher instead of timing out

    def __post_init__(self) -> None:
        if self.sweep not in ("A", "B", "C", "custom"):
            raise ValueError(f"unknown sweep {self.sweep!r}")
        if self.topics < 1 or self.subscribers_per_topic < 1 or self.iterations < 1:
            raise ValueError("T, S and iterations must be positive")
        if self.rate_hz <= 0 or self.duration <= 0 or self.warmup < 0:
            raise ValueError("rate and duration must be positive, warmup non-negative")
        if not 0 < self.utilization_cap <= 1:
            raise ValueError("utilization cap must lie in (0, 1]")
        if self.backend not in ("inproc", "shm"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.message_size < 8:
            raise ValueError("messages carry an 8-byte timestamp")

    @property
    def T(self) -> int:
        return self.topics

    @property
    def S(self) -> int:
        return self.subscribers_per_topic

    @property
    def events_per_sec(self) -> float:
        return self.topics * self.subscribers_per_topic * self.rate_hz

    @property
    def mode_name(self) -> str:
        return self.mode.mode.value

    def with_(self, **changes) -> "SweepConfig":
        return replace(self, **changes)


def sweep_configs(sweep: str, base: SweepConfig, paper_scale: bool = False) -> list[SweepConfig]:
    grid = (FULL if paper_scale else DESK)[sweep]
    return [base.with_(sweep=sweep, topics=t, subscribers_per_topic=s) for t in grid["T"] for s in grid["S"]]


def parse_mode(name: str, poll_interval_us: float = 100.0) -> DeliveryMode:
    return DeliveryMode(Mode(name), poll_interval_us * 1e-6)
