"""Core data types shared by all modules: adapters, routes, assignments, requests.

Everything here is designed to be immutable after construction and safe to
share across concurrent readers. Fractional route weights (phi) are 64-bit
floats; per-adapter phi sums are held to an absolute tolerance of 1e-9, with
renormalization allowed on construction when the drift is below 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

# A server is identified by its non-negative index within the cluster.
ServerId = int

PHI_SUM_TOL = 1e-9
PHI_RENORM_TOL = 1e-6


@dataclass(frozen=True)
class Adapter:
    """A LoRA adapter: opaque id, rank, and byte size of its weights."""

    id: str
    rank: int
    size_bytes: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"adapter {self.id!r}: rank must be >= 1, got {self.rank}")
        if self.size_bytes < 1:
            raise ValueError(
                f"adapter {self.id!r}: size_bytes must be >= 1, got {self.size_bytes}"
            )


class RouteEntry(NamedTuple):
    """One fractional route: serve this adapter on `server` with probability `phi`."""

    server: ServerId
    phi: float


@dataclass(frozen=True)
class RoutingTable:
    """Per-adapter fractional routes; phi sums to 1 for every adapter."""

    routes: Mapping[str, tuple[RouteEntry, ...]]

    @classmethod
    def build(cls, routes: Mapping[str, Iterable[tuple[ServerId, float]]]) -> "RoutingTable":
        """Construct with validation.

        Entries whose phi sum drifts from 1 by at most PHI_RENORM_TOL are
        renormalized; larger drift is rejected. Duplicate servers per adapter
        are rejected.
        """
        built: dict[str, tuple[RouteEntry, ...]] = {}
        for adapter_id, entries in routes.items():
            normalized = [RouteEntry(int(s), float(p)) for s, p in entries]
            if not normalized:
                raise ValueError(f"adapter {adapter_id!r} has no route entries")
            servers = [e.server for e in normalized]
            if len(set(servers)) != len(servers):
                raise ValueError(f"adapter {adapter_id!r} has duplicate server entries")
            for e in normalized:
                if not (0.0 <= e.phi <= 1.0 + PHI_RENORM_TOL):
                    raise ValueError(
                        f"adapter {adapter_id!r}: phi {e.phi} outside [0, 1]"
                    )
            total = sum(e.phi for e in normalized)
            drift = abs(total - 1.0)
            if drift > PHI_RENORM_TOL:
                raise ValueError(
                    f"adapter {adapter_id!r}: sum(phi)={total!r} too far from 1"
                )
            if drift > PHI_SUM_TOL:
                normalized = [RouteEntry(e.server, e.phi / total) for e in normalized]
            built[adapter_id] = tuple(normalized)
        return cls(routes=built)

    def entries(self, adapter_id: str) -> tuple[RouteEntry, ...]:
        return self.routes[adapter_id]

    def adapters(self) -> Iterable[str]:
        return self.routes.keys()

    def phi(self, adapter_id: str, server: ServerId) -> float:
        for e in self.routes.get(adapter_id, ()):
            if e.server == server:
                return e.phi
        return 0.0


def validate_routing_table(
    table: RoutingTable, cluster_adapters: Iterable[str] | None = None
) -> list[str]:
    """Check all RoutingTable invariants; return a list of violations (empty if ok).

    Violations are data, not errors: each message names the offending
    adapter. When `cluster_adapters` is given, adapters missing from the
    table are also reported.
    """
    violations: list[str] = []
    for adapter_id, entries in table.routes.items():
        if not entries:
            violations.append(f"no route entries for {adapter_id}")
            continue
        servers = [e.server for e in entries]
        if len(set(servers)) != len(servers):
            violations.append(f"duplicate server entries for {adapter_id}")
        for e in entries:
            if not (0.0 <= e.phi <= 1.0):
                violations.append(f"phi={e.phi!r} outside [0,1] for {adapter_id}")
        total = sum(e.phi for e in entries)
        if abs(total - 1.0) > PHI_SUM_TOL:
            violations.append(f"sum(phi)={total:.6g} for {adapter_id}")
    if cluster_adapters is not None:
        for adapter_id in cluster_adapters:
            if adapter_id not in table.routes:
                violations.append(f"no route entries for {adapter_id}")
    return violations


@dataclass
class Assignment:
    """Per-server adapter bundles produced by a placement policy.

    per_server maps server index -> list of (adapter id, phi). Transposing
    it yields a RoutingTable. `generation` is the rebalance epoch counter.
    """

    per_server: dict[ServerId, list[tuple[str, float]]]
    generation: int = 0

    def to_routes(self) -> dict[str, list[tuple[ServerId, float]]]:
        """Transpose to adapter -> [(server, phi)], servers in ascending order."""
        routes: dict[str, list[tuple[ServerId, float]]] = {}
        for server in sorted(self.per_server):
            for adapter_id, phi in self.per_server[server]:
                routes.setdefault(adapter_id, []).append((server, phi))
        return routes

    @classmethod
    def from_routes(
        cls,
        routes: Mapping[str, Iterable[tuple[ServerId, float]]],
        servers: Iterable[ServerId] = (),
        generation: int = 0,
    ) -> "Assignment":
        per_server: dict[ServerId, list[tuple[str, float]]] = {
            int(s): [] for s in servers
        }
        for adapter_id, entries in routes.items():
            for server, phi in entries:
                per_server.setdefault(int(server), []).append((adapter_id, phi))
        return cls(per_server=per_server, generation=generation)

    def adapters(self) -> set[str]:
        return {a for bundle in self.per_server.values() for a, _ in bundle}

    def phi_sums(self) -> dict[str, float]:
        sums: dict[str, float] = {}
        for bundle in self.per_server.values():
            for adapter_id, phi in bundle:
                sums[adapter_id] = sums.get(adapter_id, 0.0) + phi
        return sums


@dataclass(frozen=True)
class Request:
    """A single inference request as it appears in a trace."""

    request_id: str
    adapter: str
    prompt_length: int
    output_length: int
    arrival_time: float

    def __post_init__(self):
        if self.prompt_length < 1:
            raise ValueError(f"request {self.request_id!r}: prompt_length must be >= 1")
        if self.output_length < 1:
            raise ValueError(f"request {self.request_id!r}: output_length must be >= 1")
        if self.arrival_time < 0:
            raise ValueError(f"request {self.request_id!r}: arrival_time must be >= 0")

    @property
    def total_tokens(self) -> int:
        return self.prompt_length + self.output_length


@dataclass(frozen=True)
class OperatingPointTable:
    """Per-rank tokens-per-second capacity of one server under the SLO.

    Values must be positive and non-increasing in rank: a higher rank never
    sustains more tokens per second than a lower one.
    """

    max_tps: Mapping[int, float]

    def __post_init__(self):
        prev_rank = None
        prev_tps = None
        for rank in sorted(self.max_tps):
            tps = self.max_tps[rank]
            if tps <= 0:
                raise ValueError(f"operating point for rank {rank} must be > 0, got {tps}")
            if prev_tps is not None and tps > prev_tps:
                raise ValueError(
                    f"operating points must be non-increasing in rank: "
                    f"rank {rank} ({tps}) > rank {prev_rank} ({prev_tps})"
                )
            prev_rank, prev_tps = rank, tps

    def __getitem__(self, rank: int) -> float:
        return self.max_tps[rank]

    def __contains__(self, rank: int) -> bool:
        return rank in self.max_tps

    def ranks(self) -> list[int]:
        return sorted(self.max_tps)
