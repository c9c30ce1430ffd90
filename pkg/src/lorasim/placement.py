"""Adapter placement policies: rank-aware fractional packing plus baselines.

The rank-aware policy ("loraserve") works in five steps: project per-adapter
demand, convert it to per-rank utilization against profiled operating
points, budget whole servers per rank by rounding utilization shares, pack
each rank's adapters into its budgeted servers with fractional bin packing
(splitting an adapter's traffic fraction phi at server boundaries), then
re-home what did not fit and relabel servers to minimize churn against the
previous epoch.

The baselines are the static policies it is evaluated against: seeded
random round-robin and rank-sorted contiguous slicing.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from scipy.optimize import linear_sum_assignment

from .demand import DemandEstimate, TpsHistory
from .domain import Adapter, Assignment, OperatingPointTable, ServerId

PACK_EPS = 1e-12

POLICIES = ("loraserve", "random", "contiguous")


class PlacementConfigError(ValueError):
    pass


@dataclass
class UtilizationLedger:
    """Utilization bookkeeping for one placement epoch.

    target_util is the cluster-average fraction of one server's operating
    point demanded per server; rank_util holds each rank's total demand in
    server-capacity units; per_server_load tracks utilization as it is
    assigned.
    """

    target_util: float
    rank_util: dict[int, float]
    per_server_load: dict[ServerId, float] = field(default_factory=dict)


@dataclass
class RankBudget:
    """Integer number of dedicated servers per rank."""

    per_rank: dict[int, int]

    def __getitem__(self, rank: int) -> int:
        return self.per_rank.get(rank, 0)

    def total(self) -> int:
        return sum(self.per_rank.values())


@dataclass
class Leftover:
    """Residual traffic mass of an adapter that did not fit during packing."""

    adapter_id: str
    rank: int
    residual_phi: float
    residual_tokens: float


def compute_utilization(
    demand: DemandEstimate,
    adapters: Sequence[Adapter],
    op_points: OperatingPointTable,
    num_servers: int,
) -> UtilizationLedger:
    """Per-rank utilization and the average target utilization per server.

    rank_util[r] = (sum of projected load over rank-r adapters) / max_tps[r];
    target_util = sum of rank_util over ranks / K.
    """
    if num_servers < 1:
        raise PlacementConfigError(f"cluster must have >= 1 server, got {num_servers}")
    rank_util: dict[int, float] = {}
    for adapter in adapters:
        if adapter.rank not in op_points:
            raise PlacementConfigError(
                f"no operating point for rank {adapter.rank} (adapter {adapter.id!r})"
            )
        load = demand.per_adapter.get(adapter.id, 0.0)
        rank_util[adapter.rank] = rank_util.get(adapter.rank, 0.0) + load / op_points[adapter.rank]
    target_util = sum(rank_util.values()) / num_servers
    return UtilizationLedger(target_util=target_util, rank_util=rank_util)


def compute_rank_budgets(ledger: UtilizationLedger, num_servers: int) -> RankBudget:
    """Round each rank's utilization share to whole servers, then reconcile.

    Budgets are round-half-up of rank_util/target_util. When they sum past
    K, one server at a time is taken back, cycling over ranks ordered by
    smallest fractional part of their share (larger ranks first on ties),
    never driving a budget below zero. A shortfall is left as spare servers
    for the leftover phase.
    """
    if ledger.target_util == 0:
        return RankBudget(per_rank={rank: 0 for rank in ledger.rank_util})
    if ledger.target_util < 0:
        raise PlacementConfigError("target utilization must be >= 0")
    quotients = {
        rank: util / ledger.target_util for rank, util in ledger.rank_util.items()
    }
    budgets = {rank: int(math.floor(q + 0.5)) for rank, q in quotients.items()}
    excess = sum(budgets.values()) - num_servers
    if excess > 0:
        order = sorted(
            quotients, key=lambda r: (quotients[r] - math.floor(quotients[r]), -r)
        )
        while excess > 0:
            progressed = False
            for rank in order:
                if excess == 0:
                    break
                if budgets[rank] > 0:
                    budgets[rank] -= 1
                    excess -= 1
                    progressed = True
            if not progressed:
                break
    return RankBudget(per_rank=budgets)


def fractional_bin_pack(
    adapter_utils: Sequence[tuple[str, float]],
    servers: Sequence[ServerId],
    capacity: float,
) -> tuple[dict[ServerId, list[tuple[str, float]]], list[tuple[str, float, float]]]:
    """Pack adapters into servers of equal `capacity`, splitting at boundaries.

    Adapters are placed in descending-utilization order (ties by id). When an
    adapter straddles a server boundary its traffic fraction phi is split in
    proportion to the utilization served on each side. Returns the per-server
    bundles and the leftovers as (adapter id, residual phi, residual util)
    for whatever ran past the last budgeted server.
    """
    bundles: dict[ServerId, list[tuple[str, float]]] = {s: [] for s in servers}
    leftovers: list[tuple[str, float, float]] = []
    if capacity <= 0 and servers:
        raise PlacementConfigError(f"pack capacity must be > 0, got {capacity}")
    ordered = sorted(adapter_utils, key=lambda item: (-item[1], item[0]))
    server_iter = iter(servers)
    current = next(server_iter, None)
    remaining_cap = capacity
    for adapter_id, util in ordered:
        if util <= 0:
            # Zero projected load still needs a home; it costs nothing.
            if current is not None:
                bundles[current].append((adapter_id, 1.0))
            else:
                leftovers.append((adapter_id, 1.0, 0.0))
            continue
        remaining_util = util
        while remaining_util > PACK_EPS and current is not None:
            if remaining_cap <= PACK_EPS:
                current = next(server_iter, None)
                remaining_cap = capacity
                continue
            served = min(remaining_util, remaining_cap)
            bundles[current].append((adapter_id, served / util))
            remaining_cap -= served
            remaining_util -= served
        if remaining_util > PACK_EPS:
            leftovers.append((adapter_id, remaining_util / util, remaining_util))
    return bundles, leftovers


def allocate_leftovers(
    leftovers: Sequence[Leftover],
    bundles: dict[ServerId, list[tuple[str, float]]],
    ledger: UtilizationLedger,
    rank_of: Mapping[str, int],
    op_points: OperatingPointTable,
    server_tokens: Mapping[ServerId, float] | None = None,
) -> None:
    """Re-home residual adapter fractions onto already-packed servers.

    Co-batched work is paced by the largest rank present, so a server with
    max resident rank M serves its whole token load at rank-M capacity.
    Leftovers are taken in descending-rank order; each goes wholly to the
    least-loaded server already at or above its rank with capacity headroom
    (riding along without raising anyone's max rank). Failing that, the
    least-loaded server whose repriced load still fits takes it and its max
    rank rises; when no server has room, the least-loaded server absorbs it
    (overload is shared, never rejected). Ties break to the lowest index;
    loads update after each allocation.
    """
    max_rank: dict[ServerId, int] = {}
    tokens: dict[ServerId, float] = {}
    for server, bundle in bundles.items():
        max_rank[server] = max((rank_of[a] for a, _ in bundle), default=0)
        if server_tokens is not None:
            tokens[server] = server_tokens.get(server, 0.0)
        else:
            tokens[server] = ledger.per_server_load.get(server, 0.0) * (
                op_points[max_rank[server]] if max_rank[server] else 1.0
            )
    capacity = ledger.target_util

    def load(s: ServerId, extra_tokens: float = 0.0, at_rank: int = 0) -> float:
        rank = max(max_rank[s], at_rank)
        if rank == 0:
            return 0.0
        return (tokens[s] + extra_tokens) / op_points[rank]

    for leftover in sorted(
        leftovers, key=lambda lo: (-lo.rank, -lo.residual_tokens, lo.adapter_id)
    ):
        r, mass = leftover.rank, leftover.residual_tokens
        riders = [
            s for s in bundles
            if max_rank[s] >= r and load(s, mass) <= capacity + PACK_EPS
        ]
        if riders:
            eligible = riders
        else:
            eligible = [
                s for s in bundles if load(s, mass, r) <= capacity + PACK_EPS
            ]
        if not eligible:
            eligible = list(bundles)
        target = min(eligible, key=lambda s: (load(s), s))
        max_rank[target] = max(max_rank[target], r)
        tokens[target] += mass
        _merge_entry(bundles[target], leftover.adapter_id, leftover.residual_phi)
        ledger.per_server_load[target] = load(target)


def overlap_matrix(
    fresh: Assignment,
    previous: Assignment,
    demand: DemandEstimate,
    servers: Sequence[ServerId],
) -> list[list[float]]:
    """Traffic-weighted overlap between each fresh bundle and each previous bundle.

    Entry [i][j] sums, over adapters present in both, the projected TPS that
    stays put if fresh bundle i lands on server j: demand * min(phi_fresh,
    phi_prev).
    """
    fresh_phi = [
        {a: p for a, p in fresh.per_server.get(s, [])} for s in servers
    ]
    prev_phi = [
        {a: p for a, p in previous.per_server.get(s, [])} for s in servers
    ]
    matrix = []
    for i in range(len(servers)):
        row = []
        for j in range(len(servers)):
            shared = 0.0
            for adapter_id, phi in fresh_phi[i].items():
                prev = prev_phi[j].get(adapter_id)
                if prev is not None:
                    shared += demand.per_adapter.get(adapter_id, 0.0) * min(phi, prev)
            row.append(shared)
        matrix.append(row)
    return matrix


def permute_assignment(
    fresh: Assignment,
    previous: Assignment,
    demand: DemandEstimate,
) -> Assignment:
    """Relabel fresh bundles onto servers to maximize overlap with the previous epoch.

    Solves the K x K assignment problem exactly; bundle composition is
    untouched, only server labels move. An empty previous epoch returns the
    fresh assignment unchanged.
    """
    servers = sorted(fresh.per_server)
    if sorted(previous.per_server) not in ([], servers):
        raise PlacementConfigError("fresh and previous assignments must span the same servers")
    if not any(previous.per_server.values()):
        return fresh
    matrix = overlap_matrix(fresh, previous, demand, servers)
    row_ind, col_ind = linear_sum_assignment(matrix, maximize=True)
    relabeled = {s: [] for s in servers}
    for i, j in zip(row_ind, col_ind):
        relabeled[servers[j]] = fresh.per_server[servers[i]]
    return Assignment(per_server=relabeled, generation=fresh.generation)


def place(
    servers: Sequence[ServerId],
    adapters: Sequence[Adapter],
    history: TpsHistory,
    op_points: OperatingPointTable,
    previous: Assignment | None = None,
    extrapolation: str = "linear",
) -> Assignment:
    """Full rank-aware placement from recorded demand history."""
    demand = history.demand_estimate(mode=extrapolation)
    return place_from_demand(servers, adapters, demand, op_points, previous)


def place_from_demand(
    servers: Sequence[ServerId],
    adapters: Sequence[Adapter],
    demand: DemandEstimate,
    op_points: OperatingPointTable,
    previous: Assignment | None = None,
) -> Assignment:
    """Rank-aware placement from an explicit demand estimate.

    Ranks with a zero server budget contribute all their adapters to the
    leftover phase. The result covers every adapter with phi summing to 1.
    """
    servers = sorted(servers)
    if not servers:
        raise PlacementConfigError("cluster must have at least one server")
    _check_unique_ids(adapters)
    rank_of = {a.id: a.rank for a in adapters}
    ledger = compute_utilization(demand, adapters, op_points, len(servers))
    budgets = compute_rank_budgets(ledger, len(servers))

    tokens_of: dict[str, float] = {}
    by_rank: dict[int, list[tuple[str, float]]] = {}
    for adapter in adapters:
        load = demand.per_adapter.get(adapter.id, 0.0)
        tokens_of[adapter.id] = load
        by_rank.setdefault(adapter.rank, []).append(
            (adapter.id, load / op_points[adapter.rank])
        )

    bundles: dict[ServerId, list[tuple[str, float]]] = {s: [] for s in servers}
    leftovers: list[Leftover] = []
    cursor = 0
    for rank in sorted(by_rank):
        budget = budgets[rank]
        rank_servers = servers[cursor:cursor + budget]
        cursor += len(rank_servers)
        packed, spill = fractional_bin_pack(by_rank[rank], rank_servers, ledger.target_util)
        for server, bundle in packed.items():
            bundles[server].extend(bundle)
        leftovers.extend(
            Leftover(adapter_id=a, rank=rank, residual_phi=phi,
                     residual_tokens=util * op_points[rank])
            for a, phi, util in spill
        )

    server_tokens: dict[ServerId, float] = {}
    for server, bundle in bundles.items():
        server_tokens[server] = sum(phi * tokens_of[a] for a, phi in bundle)
        resident_max = max((rank_of[a] for a, _ in bundle), default=0)
        ledger.per_server_load[server] = (
            server_tokens[server] / op_points[resident_max] if resident_max else 0.0
        )
    allocate_leftovers(leftovers, bundles, ledger, rank_of, op_points, server_tokens)

    generation = (previous.generation + 1) if previous is not None else 0
    fresh = Assignment(per_server=bundles, generation=generation)
    if previous is not None:
        fresh = permute_assignment(fresh, previous, demand)
    return fresh


def place_random(
    servers: Sequence[ServerId],
    adapters: Sequence[Adapter],
    seed: int,
) -> Assignment:
    """Shuffle adapters with a seeded RNG and deal them round-robin."""
    servers = sorted(servers)
    if not servers:
        raise PlacementConfigError("cluster must have at least one server")
    _check_unique_ids(adapters)
    shuffled = list(adapters)
    random.Random(seed).shuffle(shuffled)
    bundles: dict[ServerId, list[tuple[str, float]]] = {s: [] for s in servers}
    for i, adapter in enumerate(shuffled):
        bundles[servers[i % len(servers)]].append((adapter.id, 1.0))
    return Assignment(per_server=bundles, generation=0)


def place_contiguous(
    servers: Sequence[ServerId],
    adapters: Sequence[Adapter],
) -> Assignment:
    """Sort adapters by rank and slice them contiguously across servers.

    Slice sizes differ by at most one, with the remainder going to earlier
    servers, so ranks close to each other are co-located.
    """
    servers = sorted(servers)
    if not servers:
        raise PlacementConfigError("cluster must have at least one server")
    _check_unique_ids(adapters)
    ordered = sorted(adapters, key=lambda a: (a.rank, a.id))
    quotient, remainder = divmod(len(ordered), len(servers))
    bundles: dict[ServerId, list[tuple[str, float]]] = {s: [] for s in servers}
    start = 0
    for i, server in enumerate(servers):
        size = quotient + (1 if i < remainder else 0)
        bundles[server] = [(a.id, 1.0) for a in ordered[start:start + size]]
        start += size
    return Assignment(per_server=bundles, generation=0)


def _merge_entry(bundle: list[tuple[str, float]], adapter_id: str, phi: float) -> None:
    """Add phi to an existing (server, adapter) entry instead of duplicating it."""
    for i, (existing_id, existing_phi) in enumerate(bundle):
        if existing_id == adapter_id:
            bundle[i] = (adapter_id, existing_phi + phi)
            return
    bundle.append((adapter_id, phi))


def _check_unique_ids(adapters: Sequence[Adapter]) -> None:
    seen: set[str] = set()
    for adapter in adapters:
        if adapter.id in seen:
            raise PlacementConfigError(f"duplicate adapter id {adapter.id!r}")
        seen.add(adapter.id)
