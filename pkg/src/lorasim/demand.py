"""Per-adapter request accounting and next-window TPS projection.

The orchestrator records token counts into fixed-width time windows. At each
rebalance tick the open window closes and the last one or two closed windows
drive a one-step projection of the next window's tokens-per-second demand.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

DEFAULT_FLOOR_TPS = 1.0
DEFAULT_HISTORY_DEPTH = 16
DEFAULT_EWMA_ALPHA = 0.5


class ColdStartError(LookupError):
    """No window has closed yet; the caller should fall back to the demand floor."""


@dataclass
class DemandEstimate:
    """Projected tokens-per-second load per adapter for the next window."""

    per_adapter: dict[str, float]

    def __post_init__(self):
        for adapter_id, tps in self.per_adapter.items():
            if tps < 0:
                raise ValueError(f"projected load for {adapter_id!r} is negative: {tps}")

    def __getitem__(self, adapter_id: str) -> float:
        return self.per_adapter[adapter_id]


class TpsHistory:
    """Ring of per-window aggregated TPS per registered adapter.

    Window i covers [i*window_seconds, (i+1)*window_seconds). Recording a
    request whose time falls in a later window closes every intermediate
    window, storing 0 for adapters that saw no traffic. Only the most recent
    `depth` closed windows are retained.
    """

    def __init__(
        self,
        window_seconds: float,
        adapters: Iterable[str],
        depth: int = DEFAULT_HISTORY_DEPTH,
        floor_tps: float = DEFAULT_FLOOR_TPS,
    ):
        if window_seconds <= 0:
            raise ValueError(f"window_seconds must be > 0, got {window_seconds}")
        if depth < 2:
            raise ValueError(f"history depth must be >= 2, got {depth}")
        self.window_seconds = float(window_seconds)
        self.depth = depth
        self.floor_tps = float(floor_tps)
        self._closed: dict[str, deque[float]] = {
            a: deque(maxlen=depth) for a in adapters
        }
        if not self._closed:
            raise ValueError("at least one adapter must be registered")
        self._open_tokens: dict[str, float] = {a: 0.0 for a in self._closed}
        self._open_index = 0
        self._last_time = 0.0

    @property
    def adapters(self) -> list[str]:
        return list(self._closed)

    def closed_windows(self, adapter_id: str) -> list[float]:
        """Closed-window TPS values, oldest to newest."""
        self._check_known(adapter_id)
        return list(self._closed[adapter_id])

    def record_request(self, adapter_id: str, tokens: float, time: float) -> None:
        """Accumulate `tokens` into the window containing `time`.

        Times must be non-decreasing across calls; unknown adapters are
        rejected by name.
        """
        self._check_known(adapter_id)
        if tokens < 0:
            raise ValueError(f"token count must be >= 0, got {tokens}")
        if time < self._last_time:
            raise ValueError(
                f"record times must be non-decreasing: {time} < {self._last_time}"
            )
        self._last_time = time
        index = int(time // self.window_seconds)
        if index > self._open_index:
            self._close_through(index)
        self._open_tokens[adapter_id] += tokens

    def advance_to(self, time: float) -> None:
        """Close every window that ends at or before `time`.

        Called at rebalance ticks so the just-finished window becomes the
        newest closed window even when no request arrived after it.
        """
        if time < self._last_time:
            raise ValueError(
                f"advance times must be non-decreasing: {time} < {self._last_time}"
            )
        self._last_time = time
        index = int(time // self.window_seconds)
        if index > self._open_index:
            self._close_through(index)

    def _close_through(self, new_open_index: int) -> None:
        for _ in range(self._open_index, new_open_index):
            for adapter_id, ring in self._closed.items():
                ring.append(self._open_tokens[adapter_id] / self.window_seconds)
            self._open_tokens = {a: 0.0 for a in self._closed}
        self._open_index = new_open_index

    def prev_timestep_tps(self, adapter_id: str) -> float:
        """TPS of the most recently closed window; 0 if the adapter was idle."""
        self._check_known(adapter_id)
        ring = self._closed[adapter_id]
        if not ring:
            raise ColdStartError("no window has closed yet")
        return ring[-1]

    def extrapolate(self, adapter_id: str, mode: str = "linear",
                    ewma_alpha: float = DEFAULT_EWMA_ALPHA) -> float:
        """Project the next window's TPS for one adapter.

        linear: two-point linear extrapolation of the last two closed
        windows, clamped below at the demand floor. ewma: exponentially
        weighted average over the closed windows, same clamp.
        """
        self._check_known(adapter_id)
        ring = self._closed[adapter_id]
        floor = self.floor_tps
        if not ring:
            return floor
        if mode == "ewma":
            smoothed = ring[0]
            for value in list(ring)[1:]:
                smoothed = ewma_alpha * value + (1.0 - ewma_alpha) * smoothed
            return max(floor, smoothed)
        if mode != "linear":
            raise ValueError(f"unknown extrapolation mode {mode!r}")
        if len(ring) == 1:
            return max(floor, ring[-1])
        last, prev = ring[-1], ring[-2]
        return max(floor, last + (last - prev))

    def demand_estimate(self, mode: str = "linear",
                        ewma_alpha: float = DEFAULT_EWMA_ALPHA) -> DemandEstimate:
        """Projected load for every registered adapter."""
        return DemandEstimate(
            per_adapter={
                a: self.extrapolate(a, mode=mode, ewma_alpha=ewma_alpha)
                for a in self._closed
            }
        )

    def _check_known(self, adapter_id: str) -> None:
        if adapter_id not in self._closed:
            raise KeyError(f"unknown adapter {adapter_id!r}")
