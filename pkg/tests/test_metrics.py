"""Recovery SNR, GMI against a quadrature oracle, NGMI and rate bookkeeping."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prsim.metrics import (
    NGMI_THRESHOLD,
    SCORE_FIELDS,
    MetricsError,
    gmi,
    net_ose,
    net_rate,
    ngmi,
    recovery_snr,
    score_payload,
    threshold_gmi,
)
from prsim.txsim import FrameLayout, draw_frame, gray_labels, qam_constellation, sample_mb_distribution

from oracles import UniformSource, awgn, gauss_hermite_gmi


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


class TestRecoverySnr:
    def test_perfect_is_capped(self, rng):
        s = rng.normal(size=100) + 1j * rng.normal(size=100)
        assert recovery_snr(s, s) == 80.0

    def test_scale_absorbed(self, rng):
        s = rng.normal(size=100) + 1j * rng.normal(size=100)
        assert recovery_snr(2j * s, s) == 80.0

    def test_unit_noise_is_zero_db(self, rng):
        n = 200_000
        s = np.exp(1j * np.pi / 2 * rng.integers(0, 4, n))
        noisy = s + (rng.normal(size=n) + 1j * rng.normal(size=n)) / np.sqrt(2)
        assert recovery_snr(noisy, s) == pytest.approx(0.0, abs=0.1)

    def test_orthogonal_floor(self):
        assert recovery_snr([1, 1j], [1j, 1]) == -80.0

    def test_errors(self):
        with pytest.raises(MetricsError):
            recovery_snr([], [])
        with pytest.raises(MetricsError):
            recovery_snr([1, 2], [1])


class TestGmi:
    @pytest.mark.parametrize("snr", [0.0, 10.0, 20.0])
    def test_qpsk_oracle(self, snr, rng):
        src = UniformSource(qam_constellation(4))
        idx = rng.integers(0, 4, 100_000)
        g = gmi(awgn(src.points, idx, snr, rng), idx, src)
        assert abs(g - gauss_hermite_gmi(src.points, gray_labels(4), snr)) <= 0.05

    def test_64qam_oracle(self, rng):
        src = UniformSource(qam_constellation(64))
        idx = rng.integers(0, 64, 100_000)
        g = gmi(awgn(src.points, idx, 10.0, rng), idx, src)
        assert abs(g - gauss_hermite_gmi(src.points, gray_labels(64), 10.0)) <= 0.05

    def test_uniform_64qam_saturates(self, rng):
        src = sample_mb_distribution(64, 6.0)
        idx = src.draw(20_000, rng)
        assert gmi(awgn(src.points, idx, 40.0, rng), idx, src) == pytest.approx(6.0, abs=0.01)

    def test_ps64_saturates_at_entropy(self, rng):
        src = sample_mb_distribution(64, 5.6)
        idx = src.draw(20_000, rng)
        g = gmi(awgn(src.points, idx, 40.0, rng), idx, src)
        assert g == pytest.approx(5.6, abs=0.01) and g <= src.entropy() + 1e-9

    def test_noise_monotone(self, rng):
        src = sample_mb_distribution(16, 3.5)
        idx = src.draw(30_000, rng)
        base = rng.normal(size=idx.size) + 1j * rng.normal(size=idx.size)
        gs = [gmi(src.points[idx] + np.sqrt(10 ** (-s / 10) / 2) * base, idx, src) for s in (20, 14, 8)]
        assert gs[0] >= gs[1] >= gs[2]

    def test_few_symbols_warn(self, rng):
        src = sample_mb_distribution(16, 4.0)
        idx = src.draw(500, rng)
        with pytest.warns(UserWarning, match="1e4"):
            warnings.simplefilter("always")
            gmi(src.points[idx], idx, src)

    def test_negative_labels_skipped(self, rng):
        src = sample_mb_distribution(16, 4.0)
        idx = src.draw(12_000, rng)
        y = awgn(src.points, idx, 15.0, rng)
        a = gmi(y, idx, src, noise_var=0.05)
        b = gmi(np.concatenate([y, [9.0]]), np.concatenate([idx, [-1]]), src, noise_var=0.05)
        assert a == b

    def test_length_mismatch(self):
        with pytest.raises(MetricsError):
            gmi(np.ones(3), np.zeros(2, int), sample_mb_distribution(16, 4.0))


class TestBookkeeping:
    def test_ngmi_examples(self):
        assert ngmi(5.6, 5.6, 6) == 1.0
        assert ngmi(4.879, 5.6, 6) == pytest.approx(0.8798, abs=5e-5)
        assert ngmi(5.6 - 6, 5.6, 6) == pytest.approx(0.0, abs=1e-12)

    def test_net_rate_examples(self):
        assert net_rate(100, 2, 0.1, 5.6, 0.1902, 6) == pytest.approx(835.4, abs=0.05)
        assert net_rate(50, 2, 0.1, 7.2, 0.1902, 8) == pytest.approx(532.9, abs=0.5)
        assert net_rate(100, 2, 0.0, 5.6, 0.0, 6) == 2 * 100 * 5.6

    def test_net_ose_examples(self):
        assert net_ose(835.4, 101) == pytest.approx(8.27, abs=0.01)
        assert net_ose(533, 50.5) == pytest.approx(10.55, abs=0.02)
        assert net_ose(0.0, 50.5) == 0.0

    def test_bracket_non_positive(self):
        with pytest.raises(MetricsError, match="bracket"):
            net_rate(100, 2, 0.1, 2.0, 2.0, 4)

    @pytest.mark.parametrize("kw", [dict(pilot_ratio=1.0), dict(pilot_ratio=-0.1), dict(fec_overhead=-0.1)])
    def test_rejects_bad_arguments(self, kw):
        args = dict(baud=100, n_pol=2, pilot_ratio=0.1, entropy=5.6, fec_overhead=0.1902, bits_per_symbol=6) | kw
        with pytest.raises(MetricsError):
            net_rate(**args)

    @settings(max_examples=50)
    @given(st.integers(1, 400), st.integers(1, 9), st.integers(2, 8))
    def test_linear_in_baud_and_pilot_share(self, baud, tenths, k):
        # dyadic-friendly integers keep the products exact
        r1 = net_rate(baud, 2, tenths / 10, 6.0, 0.0, 6)
        assert net_rate(k * baud, 2, tenths / 10, 6.0, 0.0, 6) == pytest.approx(k * r1, rel=1e-15)
        assert r1 == pytest.approx(2 * baud * (1 - tenths / 10) * 6.0, rel=1e-15)

    def test_threshold_gmi_bracket(self):
        g = threshold_gmi(5.6, 0.1902, 6)
        assert net_rate(1, 1, 0.0, 5.6, 0.1902, 6) == pytest.approx(g, rel=1e-12)

    def test_threshold_constant(self):
        assert NGMI_THRESHOLD == 0.8798


@pytest.fixture(scope="module")
def frame():
    return draw_frame(sample_mb_distribution(64, 5.6), FrameLayout(payload_len=12_000, training_len=0), 3)


class TestScore:
    def test_perfect_payload(self, frame):
        r = score_payload(frame.payload, frame, 100.0)
        assert r.recovery_snr_db == (80.0, 80.0)
        assert abs(r.ngmi - 1) <= 1e-3 and r.gmi <= r.entropy + 1e-9
        assert r.symbol_count == 2 * int(frame.data_mask().sum())
        assert r.net_rate_gbps == pytest.approx(835.4, abs=0.05) and r.fec_pass

    def test_row_matches_fields(self, frame):
        r = score_payload(frame.payload * np.exp(0.1j), frame, 100.0)
        assert len(r.row()) == len(SCORE_FIELDS) and set(r.to_dict()) >= {"gmi", "ngmi", "fec_pass"}

    def test_wrong_shape(self, frame):
        with pytest.raises(MetricsError):
            score_payload(frame.payload[:, :-1], frame, 100.0)
