"""Cluster configuration: adapters, server count, TP degree, SLO, cost model.

One YAML document supplies everything an experiment needs; CLI flags
override individual values. All cost coefficients are exposed by field name
under the `cost` section.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .costmodel import CostParams
from .domain import Adapter, OperatingPointTable


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    adapters: tuple[Adapter, ...]
    servers: int = 4
    slo_seconds: float = 10.0
    rebalance_window_seconds: float = 60.0
    gpu_slots: int = 8
    request_timeout_seconds: float = 120.0
    demand_floor_tps: float = 1.0
    extrapolation: str = "linear"
    history_windows: int = 16
    cost: CostParams = field(default_factory=CostParams)
    operating_points: OperatingPointTable | None = None

    def __post_init__(self):
        if self.servers < 1:
            raise ConfigError(f"servers must be >= 1, got {self.servers}")
        if self.slo_seconds <= 0:
            raise ConfigError("slo_seconds must be > 0")
        if self.rebalance_window_seconds <= 0:
            raise ConfigError("rebalance_window_seconds must be > 0")
        if self.request_timeout_seconds <= 0:
            raise ConfigError("request_timeout_seconds must be > 0")
        seen = set()
        for adapter in self.adapters:
            if adapter.id in seen:
                raise ConfigError(f"duplicate adapter id {adapter.id!r}")
            seen.add(adapter.id)

    @property
    def tp(self) -> int:
        return self.cost.tp

    def adapter_by_id(self) -> dict[str, Adapter]:
        return {a.id: a for a in self.adapters}


def load_config(path: str | Path) -> ClusterConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_dict(raw, source=str(path))


def config_from_dict(raw: dict, source: str = "<config>") -> ClusterConfig:
    adapters = []
    for i, entry in enumerate(raw.get("adapters", [])):
        try:
            adapters.append(
                Adapter(
                    id=str(entry["id"]),
                    rank=int(entry["rank"]),
                    size_bytes=int(entry["size_bytes"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: adapters[{i}]: {exc}") from None

    cost_raw = dict(raw.get("cost", {}))
    known = {f.name for f in fields(CostParams)}
    unknown = set(cost_raw) - known
    if unknown:
        raise ConfigError(f"{source}: unknown cost fields: {sorted(unknown)}")
    try:
        cost = CostParams(**cost_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: cost: {exc}") from None

    op_points = None
    if raw.get("operating_points"):
        try:
            op_points = OperatingPointTable(
                max_tps={int(k): float(v) for k, v in raw["operating_points"].items()}
            )
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"{source}: operating_points: {exc}") from None

    cluster = dict(raw.get("cluster", {}))
    kwargs = {}
    for name in ("servers", "gpu_slots", "history_windows"):
        if name in cluster:
            kwargs[name] = int(cluster[name])
    for name in ("slo_seconds", "rebalance_window_seconds",
                 "request_timeout_seconds", "demand_floor_tps"):
        if name in cluster:
            kwargs[name] = float(cluster[name])
    if "extrapolation" in cluster:
        kwargs["extrapolation"] = str(cluster["extrapolation"])
    try:
        return ClusterConfig(
            adapters=tuple(adapters), cost=cost, operating_points=op_points, **kwargs
        )
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def save_config(cfg: ClusterConfig, path: str | Path) -> None:
    doc = {
        "cluster": {
            "servers": cfg.servers,
            "slo_seconds": cfg.slo_seconds,
            "rebalance_window_seconds": cfg.rebalance_window_seconds,
            "gpu_slots": cfg.gpu_slots,
            "request_timeout_seconds": cfg.request_timeout_seconds,
            "demand_floor_tps": cfg.demand_floor_tps,
            "extrapolation": cfg.extrapolation,
            "history_windows": cfg.history_windows,
        },
        "adapters": [
            {"id": a.id, "rank": a.rank, "size_bytes": a.size_bytes}
            for a in cfg.adapters
        ],
        "cost": {f.name: getattr(cfg.cost, f.name) for f in fields(CostParams)},
    }
    if cfg.operating_points is not None:
        doc["operating_points"] = {
            int(r): float(v) for r, v in cfg.operating_points.max_tps.items()
        }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")


def with_overrides(cfg: ClusterConfig, **overrides) -> ClusterConfig:
    """Apply non-None keyword overrides; `tp` routes into the cost params."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    tp = updates.pop("tp", None)
    if tp is not None:
        updates["cost"] = replace(cfg.cost, tp=int(tp))
    return replace(cfg, **updates) if updates else cfg
