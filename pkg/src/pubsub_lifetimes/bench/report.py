"""CSV outputs: raw samples, per-configuration aggregates, (T, S) heatmap grid."""

from __future__ import annotations

import csv
from pathlib import Path

from ..errors import IoFailure
from .stats import Aggregate, aggregate

RAW_COLUMNS = ["metric", "mode", "backend", "T", "S", "R", "iter", "process", "value_us"]
AGG_COLUMNS = ["sweep", "metric", "mode", "backend", "T", "S", "R", "n", "p50_us", "p99_9_us"]


def _num(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_raw(path: Path, samples) -> int:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_COLUMNS)
        n = 0
        for s in samples:
            w.writerow([s.metric, s.mode, s.backend, s.T, s.S, _num(s.R), s.iteration, s.process, _num(s.value_us)])
            n += 1
    return n


def read_raw(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_aggregate(path: Path, rows: list[Aggregate]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_COLUMNS)
        for r in rows:
            w.writerow([r.sweep, r.metric, r.mode, r.backend, r.T, r.S, _num(r.R), r.n, _num(r.p50_us), _num(r.p99_9_us)])


def write_heatmap(path: Path, rows: list[Aggregate], metric: str = "E2E", stat: str = "p99_9_us") -> None:
    cells = {(r.T, r.S): getattr(r, stat) for r in rows if r.metric == metric}
    ts = sorted({t for t, _ in cells})
    ss = sorted({s for _, s in cells})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["T\\S"] + [str(s) for s in ss])
        for t in ts:
            w.writerow([t] + [_num(cells[(t, s)]) if (t, s) in cells else "" for s in ss])


def emit_report(samples, out_dir: str | Path, sweep: str = "custom", heatmap: bool | None = None) -> dict[str, Path]:
    """Write raw.csv, aggregate.csv and, for sweep C, heatmap.csv."""
    out = Path(out_dir)
    samples = list(samples)
    rows = aggregate(samples, sweep) if samples else []
    paths = {"raw": out / "raw.csv", "aggregate": out / "aggregate.csv"}
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_raw(paths["raw"], samples)
        write_aggregate(paths["aggregate"], rows)
        if heatmap if heatmap is not None else sweep == "C":
            paths["heatmap"] = out / "heatmap.csv"
            write_heatmap(paths["heatmap"], rows)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return paths
