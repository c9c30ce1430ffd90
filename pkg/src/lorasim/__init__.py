"""Rank-aware LoRA adapter placement, routing and migration, with a
deterministic discrete-event cluster simulator for evaluating them."""

from .config import ClusterConfig, load_config
from .costmodel import CostParams, calibrate, profile_operating_points
from .domain import (
    Adapter,
    Assignment,
    OperatingPointTable,
    Request,
    RouteEntry,
    RoutingTable,
    validate_routing_table,
)
from .simengine import SimResult, run

__all__ = [
    "Adapter",
    "Assignment",
    "ClusterConfig",
    "CostParams",
    "OperatingPointTable",
    "Request",
    "RouteEntry",
    "RoutingTable",
    "SimResult",
    "calibrate",
    "load_config",
    "profile_operating_points",
    "run",
    "validate_routing_table",
]
