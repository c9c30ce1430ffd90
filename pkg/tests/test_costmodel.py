import math

import pytest
from hypothesis import given, strategies as st

from lorasim.costmodel import (
    CalibrationError,
    CostParams,
    RatioAnchor,
    calibrate,
    decode_iter_time,
    fetch_latency,
    prefill_time,
    solve_rank_coef,
)

GIB = 1024 ** 3


class TestPrefillTime:
    def test_rank_ratio_hits_observed_anchor(self):
        p = calibrate([RatioAnchor(8, 128, 1, 2.7)], CostParams(tp=1))
        ratio = prefill_time([2000], [128], p) / prefill_time([2000], [8], p)
        assert ratio == pytest.approx(2.7, abs=0.05)

    def test_rank_zero_is_base_model(self):
        p = CostParams(tp=1)
        assert prefill_time([500], [0], p) == pytest.approx(
            p.prefill_base_s + 500 * p.prefill_token_s
        )

    def test_mixed_batch_pays_max_rank(self):
        p = CostParams(tp=1)
        mixed = prefill_time([1000, 1000], [8, 128], p)
        homogeneous = prefill_time([1000, 1000], [128, 128], p)
        assert mixed == homogeneous

    def test_resident_decode_rank_raises_cost(self):
        p = CostParams(tp=1)
        assert prefill_time([100], [8], p, resident_max_rank=128) == pytest.approx(
            prefill_time([100], [128], p)
        )

    def test_token_budget_enforced(self):
        p = CostParams(token_budget=100)
        with pytest.raises(ValueError):
            prefill_time([101], [8], p)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            prefill_time([], [], CostParams())

    @given(
        st.integers(1, 4000), st.integers(1, 4000),
        st.integers(0, 128), st.integers(0, 128),
        st.sampled_from([1, 2, 4, 8]),
    )
    def test_monotone_in_tokens_rank_and_tp(self, l1, l2, r1, r2, tp):
        p = CostParams(tp=tp)
        if l1 <= l2 and r1 <= r2:
            assert prefill_time([l1], [r1], p) <= prefill_time([l2], [r2], p)
        higher_tp = CostParams(tp=tp * 2)
        assert prefill_time([l1], [r1], higher_tp) <= prefill_time([l1], [r1], p)


class TestDecodeIterTime:
    def test_base_cost_only(self):
        p = CostParams(tp=1)
        assert decode_iter_time([0], [0], p) == pytest.approx(p.decode_base_s)

    def test_rank_difference_is_linear(self):
        p = CostParams(tp=2)
        low = decode_iter_time([100], [8], p)
        high = decode_iter_time([100], [128], p)
        assert high - low == pytest.approx(p.decode_rank_s * 120 / 2)

    def test_context_term_doubles(self):
        p = CostParams(tp=1)
        base = decode_iter_time([400], [0], p) - p.decode_base_s
        doubled = decode_iter_time([800], [0], p) - p.decode_base_s
        assert doubled == pytest.approx(2 * base)


class TestFetchLatency:
    def test_remote_is_host_plus_rdma(self):
        p = CostParams(host_bw=20e9, rdma_bw=20e9)
        size = 2 * GIB
        remote = fetch_latency(size, "remote_rdma", p)
        host = fetch_latency(size, "host", p)
        assert remote == pytest.approx(2 * host)
        assert host == pytest.approx(size / 20e9)

    def test_ssd_is_prohibitive(self):
        p = CostParams(ssd_bw=2e9)
        assert fetch_latency(2 * GIB, "ssd", p) == pytest.approx(2 * GIB / 2e9)

    def test_zero_bytes_forbidden(self):
        with pytest.raises(ValueError):
            fetch_latency(0, "host", CostParams())

    def test_unknown_source_rejected(self):
        with pytest.raises(ValueError):
            fetch_latency(1, "floppy", CostParams())

    @given(st.integers(1, 10 ** 12), st.integers(1, 5),
           st.sampled_from(["host", "remote_rdma", "ssd"]))
    def test_linear_in_bytes(self, size, factor, source):
        p = CostParams()
        assert fetch_latency(size * factor, source, p) == pytest.approx(
            factor * fetch_latency(size, source, p), rel=1e-9
        )


class TestCalibrate:
    def test_closed_form_coefficient(self):
        p = calibrate([RatioAnchor(8, 128, 1, 2.7)])
        assert p.rank_coef == pytest.approx(1.7 / 106.4, rel=1e-12)

    def test_implied_tp8_ratio_in_reported_band(self):
        p = calibrate([RatioAnchor(8, 128, 1, 2.7)])
        c = p.rank_coef
        ratio = (1 + 16 * c) / (1 + c)
        assert 1.15 <= ratio <= 1.30

    def test_identity_anchor_keeps_default(self):
        base = CostParams(rank_coef=0.042)
        p = calibrate([RatioAnchor(64, 64, 1, 1.0)], base)
        assert p.rank_coef == base.rank_coef

    def test_inconsistent_anchor_rejected(self):
        with pytest.raises(CalibrationError):
            calibrate([RatioAnchor(8, 128, 1, 0.5)])
        with pytest.raises(CalibrationError):
            calibrate([RatioAnchor(64, 64, 1, 2.0)])

    def test_70b_preset_hits_its_ratio(self):
        p = calibrate([RatioAnchor(8, 128, 1, 2.7)], model_preset="70B")
        c = p.rank_coef
        assert (1 + 16 * c) / (1 + c) == pytest.approx(1.45, abs=1e-9)
        assert p.prefill_token_s == pytest.approx(9 * CostParams().prefill_token_s)

    def test_anchor_with_tp_scales_out(self):
        target = (1 + 16 * 0.016) / (1 + 0.016)
        coef = solve_rank_coef(RatioAnchor(8, 128, 8, target))
        assert coef == pytest.approx(0.016, rel=1e-9)
