import pytest
from hypothesis import given, strategies as st

from lorasim.demand import ColdStartError, TpsHistory


def make_history(adapters=("A1",), window=60.0, floor=1.0):
    return TpsHistory(window_seconds=window, adapters=adapters, floor_tps=floor)


class TestRecordRequest:
    def test_tokens_divided_by_window(self):
        h = make_history()
        h.record_request("A1", 600, 30.0)
        h.advance_to(60.0)
        assert h.prev_timestep_tps("A1") == pytest.approx(10.0)

    def test_same_window_accumulates(self):
        h = make_history()
        h.record_request("A1", 300, 10.0)
        h.record_request("A1", 300, 50.0)
        h.advance_to(60.0)
        assert h.prev_timestep_tps("A1") == pytest.approx(10.0)

    def test_window_boundary_closes_previous(self):
        h = make_history()
        h.record_request("A1", 600, 30.0)
        h.record_request("A1", 120, 65.0)
        assert h.prev_timestep_tps("A1") == pytest.approx(10.0)
        h.advance_to(120.0)
        assert h.prev_timestep_tps("A1") == pytest.approx(2.0)

    def test_unknown_adapter_rejected(self):
        h = make_history()
        with pytest.raises(KeyError, match="A9"):
            h.record_request("A9", 10, 0.0)

    def test_time_must_be_non_decreasing(self):
        h = make_history()
        h.record_request("A1", 10, 50.0)
        with pytest.raises(ValueError):
            h.record_request("A1", 10, 40.0)

    def test_gap_windows_recorded_as_zero(self):
        h = make_history()
        h.record_request("A1", 600, 10.0)
        h.record_request("A1", 600, 190.0)
        assert h.closed_windows("A1") == pytest.approx([10.0, 0.0, 0.0])


class TestPrevTimestepTps:
    def test_returns_last_closed(self):
        h = make_history()
        h.record_request("A1", 300, 30.0)
        h.record_request("A1", 720, 70.0)
        h.advance_to(120.0)
        assert h.prev_timestep_tps("A1") == pytest.approx(12.0)

    def test_idle_adapter_reads_zero(self):
        h = make_history(adapters=("A1", "A2"))
        h.record_request("A1", 60, 30.0)
        h.advance_to(60.0)
        assert h.prev_timestep_tps("A2") == 0.0

    def test_single_window(self):
        h = make_history()
        h.record_request("A1", 480, 5.0)
        h.advance_to(60.0)
        assert h.prev_timestep_tps("A1") == pytest.approx(8.0)

    def test_cold_start_raises(self):
        h = make_history()
        with pytest.raises(ColdStartError):
            h.prev_timestep_tps("A1")


class TestExtrapolate:
    def _with_windows(self, values, floor=1.0):
        h = make_history(floor=floor)
        for i, v in enumerate(values):
            h.record_request("A1", v * 60.0, i * 60.0 + 1.0)
        h.advance_to(len(values) * 60.0)
        return h

    def test_linear_extrapolation(self):
        h = self._with_windows([10.0, 14.0])
        assert h.extrapolate("A1") == pytest.approx(18.0)

    def test_clamps_at_floor(self):
        h = self._with_windows([20.0, 5.0], floor=1.0)
        assert h.extrapolate("A1") == pytest.approx(1.0)

    def test_flat_history(self):
        h = self._with_windows([7.0, 7.0])
        assert h.extrapolate("A1") == pytest.approx(7.0)

    def test_single_window_uses_it(self):
        h = self._with_windows([9.0])
        assert h.extrapolate("A1") == pytest.approx(9.0)

    def test_no_windows_returns_floor(self):
        h = make_history(floor=2.5)
        assert h.extrapolate("A1") == pytest.approx(2.5)

    def test_ewma_mode(self):
        h = self._with_windows([8.0, 16.0])
        assert h.extrapolate("A1", mode="ewma") == pytest.approx(12.0)

    @given(
        st.lists(st.floats(0.5, 1000.0), min_size=2, max_size=6),
        st.floats(1.5, 10.0),
    )
    def test_scale_equivariance_above_floor(self, windows, lam):
        base = self._with_windows(windows, floor=1e-9)
        scaled = self._with_windows([w * lam for w in windows], floor=1e-9)
        left = base.extrapolate("A1")
        right = scaled.extrapolate("A1")
        if left > 1e-6 and right > 1e-6:
            assert right == pytest.approx(lam * left, rel=1e-9)


@given(
    st.lists(
        st.tuples(st.integers(0, 2), st.integers(1, 500), st.floats(0.0, 59.9)),
        min_size=1,
        max_size=40,
    )
)
def test_window_conservation(events):
    adapters = ("A0", "A1", "A2")
    h = TpsHistory(window_seconds=60.0, adapters=adapters, floor_tps=0.0)
    total = 0
    for idx, tokens, t in sorted(events, key=lambda e: e[2]):
        h.record_request(adapters[idx], tokens, t)
        total += tokens
    h.advance_to(60.0)
    recorded = sum(h.prev_timestep_tps(a) for a in adapters)
    assert recorded == pytest.approx(total / 60.0)


def test_demand_estimate_covers_all_adapters():
    h = make_history(adapters=("A1", "A2"), floor=1.0)
    h.record_request("A1", 6000, 30.0)
    h.advance_to(60.0)
    estimate = h.demand_estimate()
    assert estimate["A1"] == pytest.approx(100.0)
    assert estimate["A2"] == pytest.approx(1.0)  # idle adapters sit at the floor


def test_ring_depth_bounded():
    h = TpsHistory(window_seconds=1.0, adapters=("A1",), depth=4)
    for i in range(10):
        h.record_request("A1", 10, float(i) + 0.5)
    assert len(h.closed_windows("A1")) <= 4
