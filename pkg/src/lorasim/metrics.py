"""Statistics over simulation results: percentiles, SLO attainment, sweeps, reports.

Percentiles are nearest-rank (no interpolation), the standard convention for
tail-latency SLOs. Throughput under SLO is found by bisection on offered
RPS, assuming attainment is monotone non-increasing; violations of that
assumption found among the probes are flagged rather than hidden.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .simengine import SimResult


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: element ceil(p*n) of the ascending sort."""
    if not samples:
        raise ValueError("percentile of an empty sample set is undefined")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    ordered = sorted(samples)
    rank = math.ceil(p * len(ordered))
    return ordered[rank - 1]


@dataclass(frozen=True)
class SloOutcome:
    attained: bool
    margin_seconds: float
    p95_ttft: float | None
    timeouts: int


def slo_attained(result: SimResult, slo_seconds: float) -> SloOutcome:
    """SLO check: zero timeouts and P95 TTFT at or under the target.

    The margin is slo - P95 TTFT (the boundary counts as attained). Any
    timed-out request is a violation regardless of the percentile.
    """
    ttfts = result.ttft_samples()
    p95 = percentile(ttfts, 0.95) if ttfts else None
    if result.timed_out > 0:
        margin = slo_seconds - p95 if p95 is not None else -math.inf
        return SloOutcome(False, margin, p95, result.timed_out)
    if p95 is None:
        return SloOutcome(True, slo_seconds, None, 0)
    return SloOutcome(p95 <= slo_seconds, slo_seconds - p95, p95, 0)


@dataclass
class SweepOutcome:
    max_rps: float
    probes: list[tuple[float, bool]]
    monotone: bool


def throughput_under_slo(
    runner: Callable[[float], SimResult],
    slo_seconds: float,
    rps_min: float,
    rps_max: float,
    rel_tol: float = 0.05,
    audit_points: int = 0,
) -> SweepOutcome:
    """Largest offered RPS whose run attains the SLO, to a relative tolerance.

    Bisection assumes attainment is monotone non-increasing in RPS. With
    audit_points > 0, extra evenly spaced probes check that assumption; any
    inversion among all probes clears the monotone flag, and the last
    attained RPS is still returned.
    """
    if rps_min <= 0 or rps_max < rps_min:
        raise ValueError(f"need 0 < rps_min <= rps_max, got [{rps_min}, {rps_max}]")
    probes: list[tuple[float, bool]] = []

    def attained(rps: float) -> bool:
        ok = slo_attained(runner(rps), slo_seconds).attained
        probes.append((rps, ok))
        return ok

    if not attained(rps_min):
        raise RuntimeError(f"SLO unattainable even at the range minimum {rps_min} RPS")
    lo = rps_min
    hi = rps_max
    if attained(rps_max):
        lo = rps_max
    else:
        while (hi - lo) / lo > rel_tol:
            mid = (lo + hi) / 2.0
            if attained(mid):
                lo = mid
            else:
                hi = mid
    for i in range(audit_points):
        point = rps_min + (rps_max - rps_min) * (i + 1) / (audit_points + 1)
        attained(point)
    highest_true = max((rps for rps, ok in probes if ok), default=lo)
    lowest_false = min((rps for rps, ok in probes if not ok), default=math.inf)
    monotone = highest_true <= lowest_false
    return SweepOutcome(max_rps=highest_true, probes=probes, monotone=monotone)


@dataclass(frozen=True)
class LabeledResult:
    label: str
    rps: float
    result: SimResult


SUMMARY_COLUMNS = (
    "policy", "rps", "requests", "completed", "timeouts",
    "p50_ttft", "p95_ttft", "p99_ttft", "p95_tbt",
    "max_resident_adapters", "migrations", "migration_bytes", "fetch_bytes",
)
PER_REQUEST_COLUMNS = (
    "policy", "rps", "request_id", "server", "ttft", "timed_out",
    "tbt_count", "tbt_mean",
)
PER_SERVER_COLUMNS = (
    "policy", "rps", "server", "queue_p95", "prefill_p95",
    "max_resident_adapters", "fetch_count", "fetch_bytes",
)


def emit_report(results: Sequence[LabeledResult], out_dir: str | Path) -> dict[str, Path]:
    """Write summary.csv, per_request.csv and per_server.csv under out_dir.

    Column order is fixed and content is deterministic, so identical inputs
    produce byte-identical files.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from None
    paths = {
        "summary": out / "summary.csv",
        "per_request": out / "per_request.csv",
        "per_server": out / "per_server.csv",
    }
    ordered = sorted(results, key=lambda lr: (lr.label, lr.rps))
    _write_csv(paths["summary"], SUMMARY_COLUMNS, _summary_rows(ordered))
    _write_csv(paths["per_request"], PER_REQUEST_COLUMNS, _request_rows(ordered))
    _write_csv(paths["per_server"], PER_SERVER_COLUMNS, _server_rows(ordered))
    return paths


def _summary_rows(results):
    for lr in results:
        r = lr.result
        ttfts = r.ttft_samples()
        tbts = r.tbt_samples()
        total_fetch_bytes = sum(s.fetch_bytes for s in r.per_server.values())
        mig_count, mig_bytes = r.total_migrations()
        yield [
            lr.label, _fmt(lr.rps), len(r.per_request), r.completed, r.timed_out,
            _fmt(percentile(ttfts, 0.50)) if ttfts else "",
            _fmt(percentile(ttfts, 0.95)) if ttfts else "",
            _fmt(percentile(ttfts, 0.99)) if ttfts else "",
            _fmt(percentile(tbts, 0.95)) if tbts else "",
            r.max_resident_adapters(), mig_count, mig_bytes, total_fetch_bytes,
        ]


def _request_rows(results):
    for lr in results:
        for request_id in sorted(lr.result.per_request):
            rec = lr.result.per_request[request_id]
            tbt_count = len(rec.tbt)
            tbt_mean = sum(rec.tbt) / tbt_count if tbt_count else ""
            yield [
                lr.label, _fmt(lr.rps), request_id, rec.server,
                _fmt(rec.ttft) if rec.ttft is not None else "",
                int(rec.timed_out), tbt_count,
                _fmt(tbt_mean) if tbt_count else "",
            ]


def _server_rows(results):
    for lr in results:
        for sid in sorted(lr.result.per_server):
            stats = lr.result.per_server[sid]
            yield [
                lr.label, _fmt(lr.rps), sid, _fmt(stats.queue_p95),
                _fmt(stats.prefill_p95), stats.max_resident_adapters,
                stats.fetch_count, stats.fetch_bytes,
            ]


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_csv(path: Path, columns, rows) -> None:
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow(row)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from None
