"""Distributed adapter pool: host-memory locations, fetch planning, migration.

Every adapter lives in the host memory of at least one server at all times
(universal coverage). Serving a request on a server that lacks the adapter
triggers a fetch: from the server's own host pool if present, otherwise from
the least-loaded remote holder over the RDMA path. Committing a completed
fetch adds the target as a holder and lazily evicts holders the routing
table no longer sends traffic to.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Mapping

from . import costmodel
from .domain import RoutingTable, ServerId

DEFAULT_GPU_SLOTS = 8

KIND_ALREADY_LOCAL = "already_local"
KIND_LOAD_FROM_HOST = "load_from_host"
KIND_FETCH_REMOTE = "fetch_remote"


@dataclass(frozen=True)
class FetchPlan:
    kind: str
    size_bytes: int
    latency_s: float
    source: ServerId | None = None


class AdapterPool:
    """Cluster-wide adapter location table plus per-server GPU slot sets.

    The location table maps adapter id -> set of servers holding it in host
    memory. Each server additionally has a bounded LRU set of GPU-resident
    adapters. Mutations happen only from the simulator event loop.
    """

    def __init__(
        self,
        servers: Iterable[ServerId],
        adapter_sizes: Mapping[str, int],
        gpu_slots: int = DEFAULT_GPU_SLOTS,
    ):
        self.servers = sorted(servers)
        if not self.servers:
            raise ValueError("pool needs at least one server")
        if gpu_slots < 1:
            raise ValueError(f"gpu_slots must be >= 1, got {gpu_slots}")
        self.gpu_slots = gpu_slots
        self.sizes = dict(adapter_sizes)
        self.locations: dict[str, set[ServerId]] = {}
        self._host_pools: dict[ServerId, set[str]] = {s: set() for s in self.servers}
        self._gpu: dict[ServerId, OrderedDict[str, None]] = {
            s: OrderedDict() for s in self.servers
        }
        self.max_resident: dict[ServerId, int] = {s: 0 for s in self.servers}

    def register(self, adapter_id: str, holders: Iterable[ServerId]) -> None:
        """Seed an adapter's initial host-memory holders (at least one)."""
        holders = sorted(set(holders))
        if not holders:
            raise ValueError(f"adapter {adapter_id!r} needs at least one initial holder")
        if adapter_id not in self.sizes:
            raise KeyError(f"unknown adapter {adapter_id!r}")
        self.locations[adapter_id] = set(holders)
        for server in holders:
            self._host_pools[server].add(adapter_id)
            self._bump_resident(server)

    def lookup(self, adapter_id: str) -> set[ServerId]:
        """Current holder set; always non-empty for a registered adapter."""
        try:
            return set(self.locations[adapter_id])
        except KeyError:
            raise KeyError(f"unknown adapter {adapter_id!r}") from None

    def host_pool(self, server: ServerId) -> set[str]:
        return set(self._host_pools[server])

    def host_pool_size(self, server: ServerId) -> int:
        return len(self._host_pools[server])

    def is_gpu_resident(self, server: ServerId, adapter_id: str) -> bool:
        return adapter_id in self._gpu[server]

    def touch_gpu(self, server: ServerId, adapter_id: str) -> None:
        """Mark the adapter most-recently-used on the server's GPU slots."""
        lru = self._gpu[server]
        if adapter_id in lru:
            lru.move_to_end(adapter_id)
            return
        lru[adapter_id] = None
        while len(lru) > self.gpu_slots:
            lru.popitem(last=False)

    def plan_fetch(
        self,
        adapter_id: str,
        target: ServerId,
        params: costmodel.CostParams,
        load_by_server: Mapping[ServerId, float] | None = None,
    ) -> FetchPlan:
        """How to make the adapter GPU-resident on `target`, and at what cost.

        already_local: on the target's GPU slots; zero latency.
        load_from_host: in the target's host pool; one host-to-GPU hop.
        fetch_remote: from the least-loaded holder (ties to lowest index);
        the source's host-to-GPU hop plus the RDMA hop.
        """
        holders = self.lookup(adapter_id)
        size = self.sizes[adapter_id]
        if self.is_gpu_resident(target, adapter_id):
            return FetchPlan(kind=KIND_ALREADY_LOCAL, size_bytes=size, latency_s=0.0)
        if target in holders:
            return FetchPlan(
                kind=KIND_LOAD_FROM_HOST,
                size_bytes=size,
                latency_s=costmodel.fetch_latency(size, "host", params),
            )
        loads = load_by_server or {}
        source = min(sorted(holders), key=lambda s: (loads.get(s, 0.0), s))
        return FetchPlan(
            kind=KIND_FETCH_REMOTE,
            size_bytes=size,
            latency_s=costmodel.fetch_latency(size, "remote_rdma", params),
            source=source,
        )

    def commit_migration(
        self,
        adapter_id: str,
        target: ServerId,
        routing_table: RoutingTable,
    ) -> set[ServerId]:
        """Record a completed fetch and evict holders with no routed traffic.

        The target joins the holder set. Every other holder whose phi is 0
        in the current routing table is dropped, except that the set is
        never emptied. Returns the servers evicted.
        """
        holders = self.locations.setdefault(adapter_id, set())
        if target not in holders:
            holders.add(target)
            self._host_pools[target].add(adapter_id)
            self._bump_resident(target)
        evicted: set[ServerId] = set()
        for server in sorted(holders):
            if server == target:
                continue
            if len(holders) <= 1:
                break
            if routing_table.phi(adapter_id, server) == 0.0:
                holders.discard(server)
                self._host_pools[server].discard(adapter_id)
                self._gpu[server].pop(adapter_id, None)
                evicted.add(server)
        return evicted

    def coverage_ok(self, adapter_ids: Iterable[str] | None = None) -> bool:
        """True when every registered (or given) adapter has >= 1 holder."""
        ids = adapter_ids if adapter_ids is not None else self.locations.keys()
        return all(self.locations.get(a) for a in ids)

    def _bump_resident(self, server: ServerId) -> None:
        count = len(self._host_pools[server])
        if count > self.max_resident[server]:
            self.max_resident[server] = count
