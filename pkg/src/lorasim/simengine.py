"""Deterministic discrete-event simulator of a K-server serving cluster.

Each server runs prefill-prioritized continuous batching: waiting requests
are prefilled FIFO up to the token budget, otherwise one decode iteration
advances every in-flight decode. Requests are routed on arrival, may block
on an adapter fetch (which overlaps with queueing), and time out when their
TTFT exceeds the configured cutoff. A rebalance tick closes the demand
window and, for the dynamic policy, recomputes placement and atomically
swaps the routing table; adapter migration happens lazily on first use.

Events are processed in (time, priority, insertion sequence) order, so two
runs with identical inputs are bit-identical.
"""

from __future__ import annotations

import heapq
import json
import random
from array import array
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import costmodel, placement, routing
from .config import ClusterConfig, ConfigError
from .demand import DemandEstimate, TpsHistory
from .domain import Adapter, Assignment, Request, RoutingTable
from .pool import AdapterPool, KIND_ALREADY_LOCAL, KIND_FETCH_REMOTE, KIND_LOAD_FROM_HOST

ROUTERS = ("table", "toppings")

# Event kinds; ticks outrank same-time events so window boundaries close first.
_TICK, _ARRIVAL, _FETCH_DONE, _BATCH_DONE = 0, 1, 2, 3
_PRIORITY = {_TICK: 0, _ARRIVAL: 1, _FETCH_DONE: 1, _BATCH_DONE: 1}


class RequestState:
    __slots__ = (
        "req", "rank", "server", "ready", "ready_time", "solo_prefill_s",
        "remaining_output", "context", "last_token_time",
        "ttft", "timed_out", "tbt",
    )

    def __init__(self, req: Request, rank: int):
        self.req = req
        self.rank = rank
        self.server = -1
        self.ready = False
        self.ready_time = 0.0
        self.solo_prefill_s = 0.0
        self.remaining_output = 0
        self.context = 0
        self.last_token_time = 0.0
        self.ttft: float | None = None
        self.timed_out = False
        self.tbt = array("d")


class ServerSim:
    """Mutable per-server state: queues, running batch, bookkeeping."""

    def __init__(self, sid: int):
        self.sid = sid
        self.wait_queue: deque[RequestState] = deque()
        self.awaiting_fetch: dict[str, list[RequestState]] = {}
        self.running_decodes: list[RequestState] = []
        self.busy_until = 0.0
        self.running_kind: str | None = None
        self.running_batch: list[RequestState] = []
        self.batch_started = 0.0
        self.committed_prefill_s = 0.0
        self.fetch_inflight: set[str] = set()
        self.queue_samples: list[float] = []
        self.prefill_samples: list[float] = []

    def pending_max_rank(self) -> int:
        best = 0
        for rs in self.wait_queue:
            if rs.rank > best:
                best = rs.rank
        for rs in self.running_decodes:
            if rs.rank > best:
                best = rs.rank
        return best


@dataclass
class BatchDecision:
    kind: str  # "prefill" | "decode" | "idle"
    batch: list[RequestState]
    duration: float
    ejected: list[RequestState]


def schedule_server(
    server: ServerSim,
    now: float,
    params: costmodel.CostParams,
    timeout_seconds: float,
) -> BatchDecision:
    """Decide the next batch for an idle server.

    Prefill has priority: waiting requests are taken FIFO up to the token
    budget. Requests still waiting on an adapter fetch are passed over
    without losing their place (their fetch overlaps with queueing), and
    requests that have overshot the TTFT timeout are ejected during batch
    formation. With nothing ready to prefill, all in-flight decodes advance
    by one iteration; with nothing at all, the server idles.
    """
    ejected: list[RequestState] = []
    batch: list[RequestState] = []
    kept: list[RequestState] = []
    tokens = 0
    budget_hit = False
    while server.wait_queue:
        rs = server.wait_queue.popleft()
        if now - rs.req.arrival_time > timeout_seconds:
            server.committed_prefill_s -= rs.solo_prefill_s
            ejected.append(rs)
            continue
        if not rs.ready or budget_hit:
            kept.append(rs)
            continue
        if rs.req.prompt_length > params.token_budget:
            raise RuntimeError(
                f"request {rs.req.request_id!r} prompt of {rs.req.prompt_length} "
                f"tokens exceeds the {params.token_budget}-token batch budget"
            )
        if tokens + rs.req.prompt_length > params.token_budget:
            kept.append(rs)
            budget_hit = True
            continue
        server.committed_prefill_s -= rs.solo_prefill_s
        batch.append(rs)
        tokens += rs.req.prompt_length
    server.wait_queue.extend(kept)
    if batch:
        duration = costmodel.prefill_time(
            [rs.req.prompt_length for rs in batch],
            [rs.rank for rs in batch],
            params,
        )
        return BatchDecision("prefill", batch, duration, ejected)
    if server.running_decodes:
        duration = costmodel.decode_iter_time(
            [rs.context for rs in server.running_decodes],
            [rs.rank for rs in server.running_decodes],
            params,
        )
        return BatchDecision("decode", list(server.running_decodes), duration, ejected)
    return BatchDecision("idle", [], 0.0, ejected)


@dataclass
class ServerStats:
    queue_p95: float
    prefill_p95: float
    max_resident_adapters: int
    fetch_count: int
    fetch_bytes: int


@dataclass
class RequestRecord:
    server: int
    ttft: float | None
    timed_out: bool
    tbt: Sequence[float]


@dataclass
class EpochMigrations:
    epoch: int
    count: int
    bytes: int


@dataclass
class SimResult:
    per_request: dict[str, RequestRecord]
    per_server: dict[int, ServerStats]
    migrations: list[EpochMigrations]
    wall_tokens: int
    completed: int
    timed_out: int
    in_flight: int

    def ttft_samples(self) -> list[float]:
        return [
            rec.ttft
            for rec in self.per_request.values()
            if rec.ttft is not None and not rec.timed_out
        ]

    def tbt_samples(self) -> list[float]:
        pooled: list[float] = []
        for rec in self.per_request.values():
            pooled.extend(rec.tbt)
        return pooled

    def max_resident_adapters(self) -> int:
        if not self.per_server:
            return 0
        return max(s.max_resident_adapters for s in self.per_server.values())

    def total_migrations(self) -> tuple[int, int]:
        return (
            sum(m.count for m in self.migrations),
            sum(m.bytes for m in self.migrations),
        )

    def summary(self) -> dict:
        """Deterministic run summary; equal runs serialize byte-identically."""
        from .metrics import percentile

        ttfts = self.ttft_samples()
        tbts = self.tbt_samples()
        mig_count, mig_bytes = self.total_migrations()
        return {
            "requests": len(self.per_request),
            "completed": self.completed,
            "timed_out": self.timed_out,
            "in_flight": self.in_flight,
            "wall_tokens": self.wall_tokens,
            "ttft_p50": percentile(ttfts, 0.50) if ttfts else None,
            "ttft_p95": percentile(ttfts, 0.95) if ttfts else None,
            "ttft_p99": percentile(ttfts, 0.99) if ttfts else None,
            "tbt_p95": percentile(tbts, 0.95) if tbts else None,
            "migrations": mig_count,
            "migration_bytes": mig_bytes,
            "per_server": {
                str(sid): {
                    "queue_p95": stats.queue_p95,
                    "prefill_p95": stats.prefill_p95,
                    "max_resident_adapters": stats.max_resident_adapters,
                    "fetch_count": stats.fetch_count,
                    "fetch_bytes": stats.fetch_bytes,
                }
                for sid, stats in sorted(self.per_server.items())
            },
        }

    def summary_bytes(self) -> bytes:
        return json.dumps(self.summary(), sort_keys=True).encode("utf-8")


class SimEngine:
    """One simulation run; create via `run()` unless a test needs hooks."""

    def __init__(
        self,
        trace: Sequence[Request],
        placement_policy: str,
        router: str,
        cfg: ClusterConfig,
        seed: int = 0,
        event_hook: Callable[["SimEngine"], None] | None = None,
    ):
        if placement_policy not in placement.POLICIES:
            raise ConfigError(
                f"unknown placement {placement_policy!r}; expected one of {placement.POLICIES}"
            )
        if router not in ROUTERS:
            raise ConfigError(f"unknown router {router!r}; expected one of {ROUTERS}")
        self.trace = list(trace)
        for earlier, later in zip(self.trace, self.trace[1:]):
            if later.arrival_time < earlier.arrival_time:
                raise ConfigError("trace must be sorted by arrival_time")
        self.placement_policy = placement_policy
        self.router = router
        self.cfg = cfg
        self.params = cfg.cost
        self.seed = seed
        self.event_hook = event_hook

        self.adapters = list(cfg.adapters)
        self.adapter_by_id = cfg.adapter_by_id()
        for req in self.trace:
            if req.adapter not in self.adapter_by_id:
                raise ConfigError(
                    f"trace adapter {req.adapter!r} is not in the cluster config"
                )
            if req.prompt_length > self.params.token_budget:
                raise ConfigError(
                    f"request {req.request_id!r}: prompt of {req.prompt_length} tokens "
                    f"exceeds the token budget {self.params.token_budget}"
                )
        self.dynamic = placement_policy == "loraserve" and router == "table"
        if placement_policy == "loraserve" and cfg.operating_points is None:
            raise ConfigError("loraserve placement needs operating points in the config")

        self.servers = {sid: ServerSim(sid) for sid in range(cfg.servers)}
        self.route_rng = random.Random(f"{seed}:route")
        self.history = TpsHistory(
            window_seconds=cfg.rebalance_window_seconds,
            adapters=[a.id for a in self.adapters],
            depth=cfg.history_windows,
            floor_tps=cfg.demand_floor_tps,
        )
        self.pool = AdapterPool(
            servers=list(self.servers),
            adapter_sizes={a.id: a.size_bytes for a in self.adapters},
            gpu_slots=cfg.gpu_slots,
        )
        self.assignment: Assignment | None = None
        self.routing_table: RoutingTable | None = None
        self._install_initial_placement()

        self._heap: list[tuple[float, int, int, int, object]] = []
        self._seq = 0
        self.now = 0.0
        self.epoch = 0
        self._migrations: dict[int, list[int]] = {}
        self._fetch_stats: dict[int, list[int]] = {}
        self._remote_active: dict[str, int] = {}
        self._remote_waiting: dict[str, list[int]] = {}
        self._states: dict[str, RequestState] = {}
        self._arrivals_pending = len(self.trace)
        self._active = 0
        self.wall_tokens = 0

    # -- setup ---------------------------------------------------------

    def _install_initial_placement(self) -> None:
        server_ids = sorted(self.servers)
        if self.router == "toppings":
            for adapter in self.adapters:
                self.pool.register(adapter.id, server_ids)
            for sid in server_ids:
                for adapter in self.adapters[: self.cfg.gpu_slots]:
                    self.pool.touch_gpu(sid, adapter.id)
            return
        if self.placement_policy == "loraserve":
            warmup = DemandEstimate(
                per_adapter={a.id: self.cfg.demand_floor_tps for a in self.adapters}
            )
            assignment = placement.place_from_demand(
                server_ids, self.adapters, warmup, self.cfg.operating_points
            )
        elif self.placement_policy == "random":
            assignment = placement.place_random(
                server_ids, self.adapters, seed=_derive_seed(self.seed, "place")
            )
        else:
            assignment = placement.place_contiguous(server_ids, self.adapters)
        self._swap_assignment(assignment)
        routes = assignment.to_routes()
        for adapter in self.adapters:
            holders = [s for s, phi in routes[adapter.id] if phi > 0.0]
            self.pool.register(adapter.id, holders)
        for sid in server_ids:
            for adapter_id, phi in assignment.per_server.get(sid, []):
                if phi > 0.0:
                    self.pool.touch_gpu(sid, adapter_id)

    def _swap_assignment(self, assignment: Assignment) -> None:
        self.assignment = assignment
        self.routing_table = routing.build_routing_table(assignment)

    # -- event plumbing --------------------------------------------------

    def _push(self, time: float, kind: int, server: int, payload: object = None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, _PRIORITY[kind], self._seq, kind, (server, payload)))

    def run(self) -> SimResult:
        for index, req in enumerate(self.trace):
            self._push(req.arrival_time, _ARRIVAL, -1, index)
        if self.trace:
            self._push(self.cfg.rebalance_window_seconds, _TICK, -1, None)
        while self._heap:
            time, _, _, kind, (server, payload) = heapq.heappop(self._heap)
            self.now = time
            if kind == _ARRIVAL:
                self._on_arrival(self.trace[payload])
            elif kind == _BATCH_DONE:
                self._on_batch_done(self.servers[server])
            elif kind == _FETCH_DONE:
                self._on_fetch_done(self.servers[server], payload)
            else:
                self._on_tick()
            if self.event_hook is not None:
                self.event_hook(self)
        return self._result()

    # -- handlers --------------------------------------------------------

    def _on_arrival(self, req: Request) -> None:
        self._arrivals_pending -= 1
        self._active += 1
        rank = self.adapter_by_id[req.adapter].rank
        rs = RequestState(req, rank)
        rs.solo_prefill_s = costmodel.prefill_time(
            [req.prompt_length], [rank], self.params
        )
        self._states[req.request_id] = rs
        self.history.record_request(req.adapter, req.total_tokens, req.arrival_time)

        if self.router == "toppings":
            snapshots = [
                routing.ServerSnapshot(
                    server=sid,
                    backlog_seconds=max(0.0, srv.busy_until - self.now)
                    + srv.committed_prefill_s,
                    pending_max_rank=srv.pending_max_rank(),
                )
                for sid, srv in sorted(self.servers.items())
            ]
            sid = routing.route_toppings(req, snapshots, rank, self.params)
        else:
            sid = routing.route(req, self.routing_table, self.route_rng)
        rs.server = sid
        server = self.servers[sid]
        server.committed_prefill_s += rs.solo_prefill_s
        server.wait_queue.append(rs)

        loads = {
            other_sid: other.committed_prefill_s
            for other_sid, other in self.servers.items()
        }
        plan = self.pool.plan_fetch(req.adapter, sid, self.params, loads)
        if plan.kind == KIND_ALREADY_LOCAL:
            self.pool.touch_gpu(sid, req.adapter)
            rs.ready = True
            rs.ready_time = self.now
            self._try_schedule(server)
            return
        server.awaiting_fetch.setdefault(req.adapter, []).append(rs)
        if req.adapter not in server.fetch_inflight:
            self._start_fetch(server, req.adapter, plan)
        self._try_schedule(server)

    def _start_fetch(self, server: ServerSim, adapter_id: str, plan) -> None:
        if plan.kind == KIND_ALREADY_LOCAL:
            # A queued fetch was overtaken by an earlier copy; release now.
            self._push(self.now, _FETCH_DONE, server.sid, adapter_id)
            server.fetch_inflight.add(adapter_id)
            return
        if plan.kind == KIND_FETCH_REMOTE:
            if adapter_id in self._remote_active:
                self._remote_waiting.setdefault(adapter_id, []).append(server.sid)
                server.fetch_inflight.add(adapter_id)
                return
            self._remote_active[adapter_id] = server.sid
            epoch_stats = self._migrations.setdefault(self.epoch, [0, 0])
            epoch_stats[0] += 1
            epoch_stats[1] += plan.size_bytes
            stats = self._fetch_stats.setdefault(server.sid, [0, 0])
            stats[0] += 1
            stats[1] += plan.size_bytes
        server.fetch_inflight.add(adapter_id)
        self._push(self.now + plan.latency_s, _FETCH_DONE, server.sid, adapter_id)

    def _on_fetch_done(self, server: ServerSim, adapter_id: str) -> None:
        server.fetch_inflight.discard(adapter_id)
        if self.routing_table is not None:
            self.pool.commit_migration(adapter_id, server.sid, self.routing_table)
        self.pool.touch_gpu(server.sid, adapter_id)
        for rs in server.awaiting_fetch.pop(adapter_id, []):
            rs.ready = True
            rs.ready_time = self.now
        if self._remote_active.get(adapter_id) == server.sid:
            del self._remote_active[adapter_id]
            waiting = self._remote_waiting.get(adapter_id)
            if waiting:
                next_sid = waiting.pop(0)
                if not waiting:
                    del self._remote_waiting[adapter_id]
                next_server = self.servers[next_sid]
                next_server.fetch_inflight.discard(adapter_id)
                loads = {
                    sid: srv.committed_prefill_s for sid, srv in self.servers.items()
                }
                plan = self.pool.plan_fetch(adapter_id, next_sid, self.params, loads)
                self._start_fetch(next_server, adapter_id, plan)
        self._try_schedule(server)

    def _try_schedule(self, server: ServerSim) -> None:
        if server.running_kind is not None:
            return
        decision = schedule_server(
            server, self.now, self.params, self.cfg.request_timeout_seconds
        )
        for rs in decision.ejected:
            rs.timed_out = True
            self._active -= 1
        if decision.kind == "idle":
            return
        server.running_kind = decision.kind
        server.running_batch = decision.batch
        server.batch_started = self.now
        server.busy_until = self.now + decision.duration
        self._push(server.busy_until, _BATCH_DONE, server.sid, None)

    def _on_batch_done(self, server: ServerSim) -> None:
        kind = server.running_kind
        batch = server.running_batch
        duration = self.now - server.batch_started
        server.running_kind = None
        server.running_batch = []
        if kind == "prefill":
            adapters_in_batch: dict[str, None] = {}
            for rs in batch:
                rs.ttft = self.now - rs.req.arrival_time
                server.queue_samples.append(server.batch_started - rs.ready_time)
                server.prefill_samples.append(duration)
                self.wall_tokens += rs.req.prompt_length + 1
                adapters_in_batch[rs.req.adapter] = None
                if rs.ttft > self.cfg.request_timeout_seconds:
                    rs.timed_out = True
                    self._active -= 1
                elif rs.req.output_length == 1:
                    self._active -= 1
                else:
                    rs.context = rs.req.prompt_length + 1
                    rs.remaining_output = rs.req.output_length - 1
                    rs.last_token_time = self.now
                    server.running_decodes.append(rs)
            if self.routing_table is not None:
                for adapter_id in adapters_in_batch:
                    self.pool.commit_migration(adapter_id, server.sid, self.routing_table)
                    self.pool.touch_gpu(server.sid, adapter_id)
        elif kind == "decode":
            finished = []
            for rs in batch:
                rs.context += 1
                rs.remaining_output -= 1
                rs.tbt.append(self.now - rs.last_token_time)
                rs.last_token_time = self.now
                self.wall_tokens += 1
                if rs.remaining_output == 0:
                    finished.append(rs)
                    self._active -= 1
            if finished:
                done = set(id(rs) for rs in finished)
                server.running_decodes = [
                    rs for rs in server.running_decodes if id(rs) not in done
                ]
        self._try_schedule(server)

    def _on_tick(self) -> None:
        self.history.advance_to(self.now)
        self.epoch += 1
        if self.dynamic:
            demand = self.history.demand_estimate(mode=self.cfg.extrapolation)
            fresh = placement.place_from_demand(
                sorted(self.servers),
                self.adapters,
                demand,
                self.cfg.operating_points,
                previous=self.assignment,
            )
            self._swap_assignment(fresh)
        if self._arrivals_pending > 0 or self._active > 0:
            self._push(self.now + self.cfg.rebalance_window_seconds, _TICK, -1, None)

    # -- results ----------------------------------------------------------

    def _result(self) -> SimResult:
        from .metrics import percentile

        per_request = {}
        completed = timed_out = 0
        for req in self.trace:
            rs = self._states[req.request_id]
            if rs.timed_out:
                timed_out += 1
            elif rs.ttft is not None and rs.remaining_output == 0:
                completed += 1
            per_request[req.request_id] = RequestRecord(
                server=rs.server,
                ttft=rs.ttft,
                timed_out=rs.timed_out,
                tbt=rs.tbt,
            )
        in_flight = len(self.trace) - completed - timed_out
        per_server = {}
        for sid, server in sorted(self.servers.items()):
            fetch = self._fetch_stats.get(sid, [0, 0])
            per_server[sid] = ServerStats(
                queue_p95=percentile(server.queue_samples, 0.95)
                if server.queue_samples else 0.0,
                prefill_p95=percentile(server.prefill_samples, 0.95)
                if server.prefill_samples else 0.0,
                max_resident_adapters=self.pool.max_resident[sid],
                fetch_count=fetch[0],
                fetch_bytes=fetch[1],
            )
        migrations = [
            EpochMigrations(epoch=e, count=c, bytes=b)
            for e, (c, b) in sorted(self._migrations.items())
        ]
        return SimResult(
            per_request=per_request,
            per_server=per_server,
            migrations=migrations,
            wall_tokens=self.wall_tokens,
            completed=completed,
            timed_out=timed_out,
            in_flight=in_flight,
        )


def run(
    trace: Sequence[Request],
    placement_policy: str,
    router: str,
    cfg: ClusterConfig,
    seed: int = 0,
    event_hook: Callable[[SimEngine], None] | None = None,
) -> SimResult:
    """Simulate a trace under one placement policy and router."""
    engine = SimEngine(trace, placement_policy, router, cfg, seed=seed,
                       event_hook=event_hook)
    return engine.run()


@dataclass
class ProbeResult:
    ttfts: list[float]
    timed_out: bool


def run_single_server_probe(
    trace: Sequence[tuple[float, int, int]],
    rank: int,
    params: costmodel.CostParams,
    timeout_seconds: float = 120.0,
) -> ProbeResult:
    """Single-server, single-adapter run used by operating-point profiling."""
    adapter = Adapter(id=f"probe-r{rank}", rank=max(rank, 1), size_bytes=1)
    cfg = ClusterConfig(
        adapters=(adapter,),
        servers=1,
        slo_seconds=1e9,
        rebalance_window_seconds=1e9,
        request_timeout_seconds=timeout_seconds,
        cost=params,
    )
    requests = [
        Request(
            request_id=f"probe-{i:06d}",
            adapter=adapter.id,
            prompt_length=prompt,
            output_length=output,
            arrival_time=t,
        )
        for i, (t, prompt, output) in enumerate(trace)
    ]
    result = run(requests, "contiguous", "table", cfg, seed=0)
    return ProbeResult(ttfts=result.ttft_samples(), timed_out=result.timed_out > 0)


def _derive_seed(seed: int, purpose: str) -> int:
    return random.Random(f"{seed}:{purpose}").getrandbits(32)
