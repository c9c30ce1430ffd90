"""Workload trace generation, file ingestion, and RPS rescaling.

Generated traces combine an arrival process (evenly spaced or Poisson), a
rank-popularity law evaluated at each request's normalized time, a per-rank
adapter roster (fixed per rank, or apportioned by a power law over rank
index), and a request length model. Trace files are CSV with a header or
JSON lines; both carry request_id, model, adapter, prompt_length,
output_length and timestamp.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .domain import Adapter, Request

DEFAULT_RANKS = (8, 16, 32, 64, 128)
DEFAULT_MODEL_NAME = "base"
BYTES_PER_RANK_UNIT = 16 * 1024 * 1024  # rank 128 -> 2 GiB of adapter weights

ARRIVALS = ("uniform", "poisson")
POPULARITIES = ("uniform", "shifting_skew", "exponential", "power_law")

TRACE_FIELDS = ("request_id", "model", "adapter", "prompt_length", "output_length", "timestamp")


class TraceParseError(ValueError):
    pass


@dataclass(frozen=True)
class LengthModel:
    """Request length model: fixed prompt/output or lognormal pairs."""

    kind: str = "fixed"
    prompt: int = 512
    output: int = 128
    prompt_mu: float = 6.0
    prompt_sigma: float = 0.6
    output_mu: float = 4.5
    output_sigma: float = 0.6

    def sample(self, rng: random.Random) -> tuple[int, int]:
        if self.kind == "fixed":
            return self.prompt, self.output
        if self.kind == "lognormal":
            prompt = max(1, round(rng.lognormvariate(self.prompt_mu, self.prompt_sigma)))
            output = max(1, round(rng.lognormvariate(self.output_mu, self.output_sigma)))
            return prompt, output
        raise ValueError(f"unknown length model {self.kind!r}")


@dataclass(frozen=True)
class TraceConfig:
    duration_seconds: float = 600.0
    target_rps: float = 10.0
    arrival: str = "poisson"
    popularity: str = "uniform"
    popularity_alpha: float = 1.0
    ranks: tuple[int, ...] = DEFAULT_RANKS
    adapters_per_rank: int | None = 5
    total_adapters: int | None = None
    count_skew_alpha: float = 1.0
    lengths: LengthModel = field(default_factory=LengthModel)
    seed: int = 0

    def __post_init__(self):
        if self.target_rps <= 0:
            raise ValueError(f"target_rps must be > 0, got {self.target_rps}")
        if self.duration_seconds <= 0:
            raise ValueError(f"duration_seconds must be > 0")
        if self.arrival not in ARRIVALS:
            raise ValueError(f"arrival must be one of {ARRIVALS}, got {self.arrival!r}")
        if self.popularity not in POPULARITIES:
            raise ValueError(
                f"popularity must be one of {POPULARITIES}, got {self.popularity!r}"
            )
        if self.popularity == "power_law" and self.popularity_alpha <= 0:
            raise ValueError("popularity_alpha must be > 0 for power_law popularity")
        if not self.ranks:
            raise ValueError("ranks must be non-empty")
        if self.adapters_per_rank is None and self.total_adapters is None:
            raise ValueError("one of adapters_per_rank / total_adapters is required")
        if self.total_adapters is not None and self.total_adapters < len(self.ranks):
            raise ValueError("total_adapters must cover at least one adapter per rank")


def assign_power_law_counts(
    total_adapters: int, ranks: Sequence[int], alpha: float
) -> dict[int, int]:
    """Apportion a total adapter count over ranks proportionally to k^-alpha.

    k is the 1-based index of the rank in ascending order. Counts are
    rounded by largest remainder to hit the total exactly, and every rank
    keeps at least one adapter.
    """
    ranks = sorted(ranks)
    if total_adapters < len(ranks):
        raise ValueError(
            f"total {total_adapters} cannot give each of {len(ranks)} ranks an adapter"
        )
    weights = [(k + 1) ** (-alpha) for k in range(len(ranks))]
    scale = sum(weights)
    quotas = [total_adapters * w / scale for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    remainder = total_adapters - sum(counts)
    order = sorted(range(len(ranks)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    # Guarantee one adapter per rank, borrowing from the largest counts.
    for i in range(len(counts)):
        while counts[i] < 1:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] += 1
    return {rank: count for rank, count in zip(ranks, counts)}


def adapter_counts(cfg: TraceConfig) -> dict[int, int]:
    if cfg.total_adapters is not None:
        return assign_power_law_counts(cfg.total_adapters, cfg.ranks, cfg.count_skew_alpha)
    return {rank: cfg.adapters_per_rank for rank in sorted(cfg.ranks)}


def trace_adapters(cfg: TraceConfig) -> list[Adapter]:
    """The adapter roster a generated trace draws from, sizes set by rank."""
    roster = []
    for rank, count in adapter_counts(cfg).items():
        for i in range(count):
            roster.append(
                Adapter(
                    id=f"adapter-r{rank}-{i:03d}",
                    rank=rank,
                    size_bytes=rank * BYTES_PER_RANK_UNIT,
                )
            )
    return roster


def rank_shares(cfg: TraceConfig, normalized_time: float) -> dict[int, float]:
    """Per-rank request share at normalized time t/duration in [0, 1]."""
    ranks = sorted(cfg.ranks)
    n = len(ranks)
    if n == 1:
        return {ranks[0]: 1.0}
    if cfg.popularity == "uniform":
        return {r: 1.0 / n for r in ranks}
    if cfg.popularity == "exponential":
        weights = [math.exp(-i) for i in range(n)]
        total = sum(weights)
        return {r: w / total for r, w in zip(ranks, weights)}
    if cfg.popularity == "power_law":
        weights = [(i + 1) ** (-cfg.popularity_alpha) for i in range(n)]
        total = sum(weights)
        return {r: w / total for r, w in zip(ranks, weights)}
    if cfg.popularity == "shifting_skew":
        tau = min(1.0, max(0.0, normalized_time))
        minor = 0.5 / (n - 1)
        shares = {r: minor for r in ranks}
        shares[ranks[-1]] = 0.5 + (minor - 0.5) * tau
        shares[ranks[0]] = minor + (0.5 - minor) * tau
        return shares
    raise ValueError(f"unknown popularity {cfg.popularity!r}")


def _arrival_times(cfg: TraceConfig, rng: random.Random) -> list[float]:
    if cfg.arrival == "uniform":
        gap = 1.0 / cfg.target_rps
        n = int(cfg.duration_seconds * cfg.target_rps)
        return [i * gap for i in range(n)]
    times = []
    t = 0.0
    while True:
        t += rng.expovariate(cfg.target_rps)
        if t > cfg.duration_seconds:
            break
        times.append(t)
    return times


def generate_trace(cfg: TraceConfig) -> list[Request]:
    """Draw a full trace: arrivals, ranks, adapters within rank, lengths."""
    rng = random.Random(cfg.seed)
    roster = trace_adapters(cfg)
    by_rank: dict[int, list[str]] = {}
    for adapter in roster:
        by_rank.setdefault(adapter.rank, []).append(adapter.id)
    ranks = sorted(by_rank)

    requests = []
    for i, t in enumerate(_arrival_times(cfg, rng)):
        shares = rank_shares(cfg, t / cfg.duration_seconds)
        draw = rng.random()
        cumulative = 0.0
        rank = ranks[-1]
        for r in ranks:
            cumulative += shares[r]
            if draw < cumulative:
                rank = r
                break
        adapter_id = by_rank[rank][rng.randrange(len(by_rank[rank]))]
        prompt, output = cfg.lengths.sample(rng)
        requests.append(
            Request(
                request_id=f"req-{i:06d}",
                adapter=adapter_id,
                prompt_length=prompt,
                output_length=output,
                arrival_time=t,
            )
        )
    requests.sort(key=lambda r: r.arrival_time)
    return requests


def scale_trace_rps(trace: Sequence[Request], target_rps: float) -> list[Request]:
    """Rescale timestamps to a target RPS, preserving the arrival shape.

    Every timestamp is multiplied by current_rps / target_rps, where
    current_rps = (n - 1) / (t_last - t_first).
    """
    if not trace:
        raise ValueError("cannot rescale an empty trace")
    if target_rps <= 0:
        raise ValueError(f"target_rps must be > 0, got {target_rps}")
    span = trace[-1].arrival_time - trace[0].arrival_time
    if len(trace) < 2 or span <= 0:
        raise ValueError("trace has zero duration; cannot infer its rate")
    current_rps = (len(trace) - 1) / span
    factor = current_rps / target_rps
    return [
        Request(
            request_id=r.request_id,
            adapter=r.adapter,
            prompt_length=r.prompt_length,
            output_length=r.output_length,
            arrival_time=r.arrival_time * factor,
        )
        for r in trace
    ]


def write_trace(trace: Sequence[Request], path: str | Path,
                model: str = DEFAULT_MODEL_NAME) -> None:
    """Write a trace as CSV with a header row."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for r in trace:
            writer.writerow(
                [r.request_id, model, r.adapter, r.prompt_length,
                 r.output_length, repr(r.arrival_time)]
            )


def load_trace(path: str | Path) -> list[Request]:
    """Parse a CSV (header required) or JSON-lines trace file.

    Rows come back sorted by timestamp (stable on ties). Missing fields,
    non-numeric lengths, negative timestamps and duplicate request ids are
    reported with their line number.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        fh.seek(0)
        if first.lstrip().startswith("{"):
            rows = list(_read_jsonl(fh))
        else:
            rows = list(_read_csv(fh))
    requests = []
    seen: set[str] = set()
    for line_no, row in rows:
        request = _row_to_request(row, line_no)
        if request.request_id in seen:
            raise TraceParseError(
                f"line {line_no}: duplicate request_id {request.request_id!r}"
            )
        seen.add(request.request_id)
        requests.append(request)
    requests.sort(key=lambda r: r.arrival_time)
    return requests


def _read_csv(fh):
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        raise TraceParseError("empty trace file")
    missing = [f for f in TRACE_FIELDS if f not in reader.fieldnames]
    if missing:
        raise TraceParseError(f"header is missing fields: {', '.join(missing)}")
    for row in reader:
        yield reader.line_num, row


def _read_jsonl(fh):
    for line_no, line in enumerate(fh, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"line {line_no}: invalid JSON ({exc})") from None
        yield line_no, row


def _row_to_request(row, line_no: int) -> Request:
    for name in TRACE_FIELDS:
        if row.get(name) in (None, ""):
            raise TraceParseError(f"line {line_no}: missing field {name!r}")
    try:
        prompt = int(row["prompt_length"])
        output = int(row["output_length"])
    except (TypeError, ValueError):
        raise TraceParseError(f"line {line_no}: non-numeric length") from None
    try:
        timestamp = float(row["timestamp"])
    except (TypeError, ValueError):
        raise TraceParseError(f"line {line_no}: non-numeric timestamp") from None
    if timestamp < 0:
        raise TraceParseError(f"line {line_no}: negative timestamp {timestamp}")
    if prompt < 1 or output < 1:
        raise TraceParseError(f"line {line_no}: lengths must be >= 1")
    return Request(
        request_id=str(row["request_id"]),
        adapter=str(row["adapter"]),
        prompt_length=prompt,
        output_length=output,
        arrival_time=timestamp,
    )
