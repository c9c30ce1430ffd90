"""Request-to-server routing.

Table routing draws a server per request with the adapter's fractional
weights. The load-aware baseline router instead picks, over all servers, the
one minimizing the request's estimated completion time under the cost model
(full replication assumed, so every server is eligible).
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

from . import costmodel
from .domain import Assignment, Request, RoutingTable, ServerId, validate_routing_table


class RoutingError(KeyError):
    pass


def build_routing_table(assignment: Assignment) -> RoutingTable:
    """Transpose an assignment into a validated routing table."""
    table = RoutingTable.build(assignment.to_routes())
    violations = validate_routing_table(table)
    if violations:
        raise ValueError(f"assignment does not transpose to a valid table: {violations}")
    return table


def route(request: Request, table: RoutingTable, rng: random.Random) -> ServerId:
    """Pick a server for the request with probability phi per route entry."""
    entries = table.routes.get(request.adapter)
    if not entries:
        raise RoutingError(f"no route for adapter {request.adapter!r}")
    draw = rng.random()
    cumulative = 0.0
    last_positive = None
    for entry in entries:
        if entry.phi <= 0.0:
            continue
        cumulative += entry.phi
        last_positive = entry.server
        if draw < cumulative:
            return entry.server
    if last_positive is None:
        raise RoutingError(f"all route weights are zero for {request.adapter!r}")
    return last_positive


@dataclass(frozen=True)
class ServerSnapshot:
    """What the load-aware router sees of one server at routing time.

    backlog_seconds: outstanding prefill work in the queue plus the running
    batch, in model seconds. pending_max_rank: largest rank the request
    would share the server with (queued or decoding).
    """

    server: ServerId
    backlog_seconds: float
    pending_max_rank: int


def route_toppings(
    request: Request,
    cluster_state: Sequence[ServerSnapshot],
    rank_of_adapter: int,
    params: costmodel.CostParams,
) -> ServerId:
    """Route to the server minimizing this request's estimated completion time.

    Completion estimate = server backlog + the request's own prefill time
    there, where the prefill pays the max-rank penalty of whatever is
    already pending on that server. Ties break to the lowest server index.
    """
    if not cluster_state:
        raise RoutingError("cluster snapshot is empty")
    best: ServerId | None = None
    best_cost = None
    for snap in cluster_state:
        marginal = costmodel.prefill_time(
            [request.prompt_length], [rank_of_adapter], params,
            resident_max_rank=snap.pending_max_rank,
        )
        total = snap.backlog_seconds + marginal
        if best_cost is None or total < best_cost or (total == best_cost and snap.server < best):
            best = snap.server
            best_cost = total
    return best
