"""Parametric latency model for rank-sensitive LoRA serving.

Prefill cost is linear in prompt tokens with a multiplicative rank factor:
the whole batch pays for the largest rank present (batched LoRA kernels size
their work to the maximum rank). Tensor parallelism divides the rank factor.
Decode iterations are modeled as a base cost plus rank and context terms.
Adapter fetches are bandwidth-limited transfers from host memory, a remote
server (host-to-GPU hop then RDMA hop), or SSD.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

from .domain import OperatingPointTable


class CalibrationError(ValueError):
    """The supplied anchors admit no non-negative rank coefficient."""


class ProfilingError(RuntimeError):
    """The SLO is unachievable for a rank even at minimal load."""


@dataclass(frozen=True)
class CostParams:
    """Coefficients of the rank/TP/length-sensitive latency model.

    prefill_token_s: prefill seconds per prompt token (base model, TP=1).
    prefill_base_s: fixed prefill overhead seconds.
    rank_coef: dimensionless rank coefficient per unit rank.
    tp: tensor-parallel degree; adapter cost is sharded across TP GPUs.
    decode_base_s: base seconds per decode iteration.
    decode_rank_s: decode seconds per unit rank.
    decode_ctx_s: decode seconds per context token in the batch.
    host_bw / rdma_bw / ssd_bw: transfer bandwidths in bytes/second.
    token_budget: maximum prefill tokens per batch.
    """

    prefill_token_s: float = 0.25e-3
    prefill_base_s: float = 20e-3
    rank_coef: float = 1.7 / 106.4
    tp: int = 1
    decode_base_s: float = 25e-3
    decode_rank_s: float = 0.05e-3
    decode_ctx_s: float = 0.5e-6
    host_bw: float = 20e9
    rdma_bw: float = 20e9
    ssd_bw: float = 2e9
    token_budget: int = 8192

    def __post_init__(self):
        for name in ("prefill_token_s", "prefill_base_s", "rank_coef",
                     "decode_base_s", "decode_rank_s", "decode_ctx_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("host_bw", "rdma_bw", "ssd_bw"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.tp < 1:
            raise ValueError(f"tp must be >= 1, got {self.tp}")
        if self.token_budget < 1:
            raise ValueError(f"token_budget must be >= 1, got {self.token_budget}")

    def rank_factor(self, rank: int) -> float:
        return 1.0 + self.rank_coef * rank / self.tp


# (prefill_token_s, prefill_base_s) scale and rank-128-vs-8 relative TTFT at
# TP=8 for each model-size preset. 7B keeps the calibrated coefficient; the
# larger presets re-solve it from their TP=8 ratio target.
MODEL_PRESETS: dict[str, tuple[float, float | None]] = {
    "7B": (1.0, None),
    "30B": (4.0, 1.33),
    "70B": (9.0, 1.45),
}


def prefill_time(
    prompt_lengths: Sequence[int],
    ranks: Sequence[int],
    params: CostParams,
    resident_max_rank: int = 0,
) -> float:
    """Seconds to prefill one batch.

    The batch pays (base + per-token * total tokens) inflated by the rank
    factor of the largest rank present, including `resident_max_rank` of any
    co-scheduled decodes. Exceeding the token budget is a scheduling bug.
    """
    if not prompt_lengths:
        raise ValueError("prefill batch must be non-empty")
    if len(prompt_lengths) != len(ranks):
        raise ValueError("prompt_lengths and ranks must have equal length")
    total = sum(prompt_lengths)
    if total > params.token_budget:
        raise ValueError(
            f"prefill batch of {total} tokens exceeds token budget {params.token_budget}"
        )
    r_eff = max(max(ranks), resident_max_rank)
    return (params.prefill_base_s + params.prefill_token_s * total) * params.rank_factor(r_eff)


def decode_iter_time(
    context_lengths: Sequence[int],
    ranks: Sequence[int],
    params: CostParams,
) -> float:
    """Seconds for one decode iteration over the whole decoding batch."""
    if not context_lengths:
        raise ValueError("decode batch must be non-empty")
    if len(context_lengths) != len(ranks):
        raise ValueError("context_lengths and ranks must have equal length")
    r_eff = max(ranks)
    return (
        params.decode_base_s
        + params.decode_rank_s * r_eff / params.tp
        + params.decode_ctx_s * sum(context_lengths)
    )


FETCH_SOURCES = ("host", "remote_rdma", "ssd")


def fetch_latency(size_bytes: int, source: str, params: CostParams) -> float:
    """Seconds to make an adapter of `size_bytes` GPU-resident from `source`.

    The remote path pays the source's host-to-GPU hop and then the
    inter-node RDMA hop.
    """
    if size_bytes <= 0:
        raise ValueError(f"size_bytes must be > 0, got {size_bytes}")
    if source == "host":
        return size_bytes / params.host_bw
    if source == "remote_rdma":
        return size_bytes / params.host_bw + size_bytes / params.rdma_bw
    if source == "ssd":
        return size_bytes / params.ssd_bw
    raise ValueError(f"unknown fetch source {source!r}; expected one of {FETCH_SOURCES}")


class RatioAnchor(NamedTuple):
    """Observed prefill-time ratio between two ranks at a given TP degree."""

    rank_lo: int
    rank_hi: int
    tp: int
    ratio: float


def solve_rank_coef(anchor: RatioAnchor) -> float | None:
    """Closed-form rank coefficient for one anchor; None if unconstraining.

    (1 + c*rank_hi/tp) / (1 + c*rank_lo/tp) = ratio  solves to
    c = tp*(ratio-1) / (rank_hi - ratio*rank_lo).
    """
    if anchor.rank_hi == anchor.rank_lo:
        if math.isclose(anchor.ratio, 1.0):
            return None
        raise CalibrationError(
            f"equal ranks {anchor.rank_lo} cannot produce ratio {anchor.ratio}"
        )
    denominator = anchor.rank_hi - anchor.ratio * anchor.rank_lo
    if denominator <= 0:
        raise CalibrationError(
            f"anchor {anchor} admits no finite rank coefficient"
        )
    coef = anchor.tp * (anchor.ratio - 1.0) / denominator
    if coef < 0:
        raise CalibrationError(f"anchor {anchor} implies a negative rank coefficient")
    return coef


def calibrate(
    anchors: Iterable[RatioAnchor],
    base: CostParams | None = None,
    model_preset: str = "7B",
) -> CostParams:
    """Fit CostParams to observed rank-ratio anchors.

    The rank coefficient is solved in closed form from the first
    constraining anchor; remaining anchors must also admit non-negative
    solutions. Model-size presets scale the prefill constants and, for the
    larger presets, re-solve the coefficient from that preset's TP=8 ratio
    target.
    """
    base = base or CostParams()
    if model_preset not in MODEL_PRESETS:
        raise CalibrationError(
            f"unknown model preset {model_preset!r}; expected one of {sorted(MODEL_PRESETS)}"
        )
    coef = None
    for anchor in anchors:
        solved = solve_rank_coef(anchor)
        if solved is not None and coef is None:
            coef = solved
    if coef is None:
        coef = base.rank_coef
    scale, tp8_ratio = MODEL_PRESETS[model_preset]
    if tp8_ratio is not None:
        # Re-solve at TP=8 between ranks 8 and 128: (1+16c)/(1+c) = target.
        coef = (tp8_ratio - 1.0) / (16.0 - tp8_ratio)
    return replace(
        base,
        rank_coef=coef,
        prefill_token_s=base.prefill_token_s * scale,
        prefill_base_s=base.prefill_base_s * scale,
    )


def profile_operating_points(
    params: CostParams,
    slo_seconds: float,
    ranks: Sequence[int],
    prompt_length: int = 512,
    output_length: int = 128,
    duration_seconds: float = 120.0,
    seed: int = 0,
    rel_tol: float = 0.02,
    rps_floor: float = 0.05,
) -> OperatingPointTable:
    """Binary-search the per-rank single-server TPS capacity under the SLO.

    For each rank, offered load is a Poisson arrival stream of fixed-length
    requests on one simulated server; the operating point is the largest
    offered tokens-per-second whose P95 TTFT meets the SLO with no timeouts.
    The resulting table is clamped to be non-increasing in rank.
    """
    from . import simengine

    if slo_seconds <= 0:
        raise ValueError(f"slo_seconds must be > 0, got {slo_seconds}")
    if not ranks:
        raise ValueError("ranks must be non-empty")

    tokens_per_request = prompt_length + output_length

    def attained(rank: int, rps: float) -> bool:
        trace = _poisson_probe_trace(rank, rps, prompt_length, output_length,
                                     duration_seconds, seed)
        if not trace:
            return True
        result = simengine.run_single_server_probe(trace, rank, params)
        if result.timed_out:
            return False
        if not result.ttfts:
            return True
        from .metrics import percentile

        return percentile(result.ttfts, 0.95) <= slo_seconds

    table: dict[int, float] = {}
    prev_tps = None
    for rank in sorted(ranks):
        lo = rps_floor
        if not attained(rank, lo):
            raise ProfilingError(
                f"rank {rank}: P95 TTFT exceeds SLO {slo_seconds}s even at {lo} RPS"
            )
        hi = max(2 * lo, 1.0)
        while attained(rank, hi):
            lo = hi
            hi *= 2.0
            if hi > 1e6:
                break
        while (hi - lo) / lo > rel_tol:
            mid = (lo + hi) / 2.0
            if attained(rank, mid):
                lo = mid
            else:
                hi = mid
        tps = lo * tokens_per_request
        if prev_tps is not None and tps > prev_tps:
            tps = prev_tps
        table[rank] = tps
        prev_tps = tps
    return OperatingPointTable(max_tps=table)


def _poisson_probe_trace(rank, rps, prompt_length, output_length, duration, seed):
    rng = random.Random(f"{seed}:profile:{rank}:{rps}")
    trace = []
    t = 0.0
    i = 0
    while True:
        t += rng.expovariate(rps)
        if t > duration:
            break
        trace.append((t, prompt_length, output_length))
        i += 1
    return trace
