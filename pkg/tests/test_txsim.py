"""Shaping, framing, modulation and transmitter impairments."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prsim.signal import ComplexWaveform, FrequencyResponse, fft_freqs, matched_filter
from prsim.txsim import (
    FrameLayout,
    TxImpairments,
    apply_tx_impairments,
    draw_frame,
    gray_labels,
    invert_tx_impairments,
    modulate,
    mzm_transfer,
    qam_constellation,
    sample_mb_distribution,
)


def _empirical_entropy(idx, order):
    p = np.bincount(idx, minlength=order) / idx.size
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


@pytest.fixture(scope="module")
def ps64():
    return sample_mb_distribution(64, 5.6)


class TestConstellation:
    @pytest.mark.parametrize("order", [4, 16, 64, 256])
    def test_gray_neighbours_differ_by_one_bit(self, order):
        pts = qam_constellation(order)
        lab = gray_labels(order)
        d = np.abs(pts[:, None] - pts[None, :])
        for k in range(order):
            nn = np.flatnonzero(np.isclose(d[k], 2.0))
            assert all(np.sum(lab[k] != lab[j]) == 1 for j in nn)

    def test_labels_unique(self):
        lab = gray_labels(64)
        assert len({tuple(r) for r in lab}) == 64


class TestShaping:
    def test_max_entropy_is_uniform(self):
        s = sample_mb_distribution(64, 6.0)
        assert s.nu == 0
        np.testing.assert_allclose(s.distribution, 1 / 64)

    @pytest.mark.parametrize("order,h", [(64, 5.6), (256, 7.2), (16, 3.1)])
    def test_entropy_hits_target(self, order, h):
        assert abs(sample_mb_distribution(order, h).entropy() - h) < 1e-6

    def test_inner_ring_more_probable(self, ps64):
        e = np.abs(qam_constellation(64)) ** 2
        assert ps64.distribution[np.argmin(e)] > ps64.distribution[np.argmax(e)]

    def test_symmetry(self, ps64):
        pts = qam_constellation(64)
        p = dict(zip(np.round(pts, 9), ps64.distribution))
        for c, pc in p.items():
            assert p[np.round(-c, 9)] == pytest.approx(pc, abs=1e-15)
            assert p[np.round(np.conj(c), 9)] == pytest.approx(pc, abs=1e-15)

    def test_unit_power_and_normalized(self, ps64):
        assert abs(ps64.distribution.sum() - 1) < 1e-12
        assert abs(np.sum(ps64.distribution * np.abs(ps64.points) ** 2) - 1) < 1e-12

    @pytest.mark.parametrize("order,h", [(64, 6.5), (64, 1.9), (32, 4.0)])
    def test_rejects_bad_targets(self, order, h):
        with pytest.raises(ValueError):
            sample_mb_distribution(order, h)

    def test_empirical_entropy(self, ps64):
        idx = ps64.draw(10**6, np.random.default_rng(11))
        assert abs(_empirical_entropy(idx, 64) - 5.6) < 0.01


class TestFrame:
    def test_pilot_positions(self):
        lay = FrameLayout(payload_len=100, pilot_ratio=0.1, training_len=0)
        np.testing.assert_array_equal(lay.pilot_positions, np.arange(0, 100, 10))

    def test_defaults(self):
        assert FrameLayout().training_len == 8192

    def test_deterministic(self, ps64):
        lay = FrameLayout(payload_len=512, training_len=64)
        a, b = draw_frame(ps64, lay, 5), draw_frame(ps64, lay, 5)
        np.testing.assert_array_equal(a.symbols, b.symbols)

    def test_pilots_invariant_under_seed(self, ps64):
        lay = FrameLayout(payload_len=512, training_len=64)
        a, b = draw_frame(ps64, lay, 1), draw_frame(ps64, lay, 2)
        k = a.pilot_index
        np.testing.assert_allclose(a.symbols[:, k] / a.scale[:, None], b.symbols[:, k] / b.scale[:, None], atol=1e-12)
        assert not np.allclose(a.payload, b.payload)

    def test_training_is_uniform_64qam(self):
        t = FrameLayout(training_len=8192).training_sequence()
        assert len(np.unique(np.round(t, 9))) == 64

    def test_labels_match_payload(self, ps64):
        fr = draw_frame(ps64, FrameLayout(payload_len=300, training_len=16), 3)
        dm = fr.data_mask()
        for p in range(2):
            np.testing.assert_allclose(fr.payload[p, dm], ps64.points[fr.labels[p, dm]] * fr.scale[p], atol=1e-12)
        assert np.all(fr.labels[:, ~dm] == -1)

    def test_shaped_field_unit_power(self, ps64):
        fr = draw_frame(ps64, FrameLayout(payload_len=1000, training_len=0), 4)
        for p in range(2):
            w = modulate(fr.symbols[p])
            # modulate's normalization is a no-op for frame symbols
            np.testing.assert_allclose(matched_filter(w, 0.01) / np.sqrt(2), fr.symbols[p], atol=1e-12)

    def test_training_only_burst(self):
        lay = FrameLayout(payload_len=0, pilot_ratio=0.0, training_len=256)
        fr = draw_frame(sample_mb_distribution(16, 4.0), lay, 0)
        assert fr.symbols.shape == (2, 256) and fr.payload.shape == (2, 0)

    def test_payload_entropy_histogram(self, ps64):
        lay = FrameLayout(payload_len=500_000, pilot_ratio=0.0, training_len=0)
        fr = draw_frame(ps64, lay, 9)
        assert abs(_empirical_entropy(fr.labels.ravel(), 64) - 5.6) < 0.01


class TestModulate:
    def test_unit_power(self):
        s = np.random.default_rng(0).normal(size=(2048, 2)) @ [1, 1j] * 3
        assert abs(modulate(s).mean_power() - 1) < 1e-6

    def test_matched_filter_recovers(self):
        pts = qam_constellation(16)
        s = pts[np.random.default_rng(1).integers(0, 16, 4096)]
        w = modulate(s, span=256)
        r = matched_filter(w, 0.01, span=256)
        g = np.vdot(r, s) / np.vdot(r, r)
        assert 10 * np.log10(np.mean(np.abs(g * r - s) ** 2) / np.mean(np.abs(s) ** 2)) <= -30

    def test_spectrum_width(self):
        s = np.exp(1j * np.pi / 2 * np.random.default_rng(2).integers(0, 4, 8192))
        w = modulate(s, symbol_rate=100e9)
        P = np.abs(np.fft.fft(w.samples)) ** 2
        f = np.abs(fft_freqs(len(w), w.sample_rate))
        occupied = 2 * f[P > P.max() * 1e-6].max()
        assert occupied == pytest.approx(101e9, rel=0.01)


def _tone(n=1024, k=37, rs=1.0):
    t = np.arange(n)
    return ComplexWaveform(np.exp(2j * np.pi * k * t / n), 2.0 * rs, rs)


class TestImpairments:
    def test_neutral_identity(self):
        w = modulate(np.random.default_rng(3).normal(size=(512, 2)) @ [1, 1j])
        np.testing.assert_allclose(apply_tx_impairments(w, TxImpairments()).samples, w.samples, atol=1e-9)

    @pytest.mark.parametrize("eps_db,phi_deg", [(1.0, 0.0), (0.5, 3.0), (-2.0, -5.0)])
    def test_image_ratio(self, eps_db, phi_deg):
        # closed form: I -> gi e^{-jh} i, Q -> j gq e^{jh} q
        n, k = 1024, 37
        y = apply_tx_impairments(_tone(n, k), TxImpairments(iq_gain_imbalance_db=eps_db, iq_phase_error_deg=phi_deg)).samples
        Y = np.fft.fft(y) / n
        gi, gq, h = 10 ** (eps_db / 40), 10 ** (-eps_db / 40), np.deg2rad(phi_deg) / 2
        mu = (gi * np.exp(-1j * h) + gq * np.exp(1j * h)) / 2
        nu = (gi * np.exp(-1j * h) - gq * np.exp(1j * h)) / 2
        assert abs(Y[k]) == pytest.approx(abs(mu), rel=1e-12)
        assert abs(Y[n - k]) / abs(Y[k]) == pytest.approx(abs(nu / mu), rel=1e-9)

    def test_mzm_pointwise(self):
        v = np.tile([0.6, -0.6], 64) + 1j * np.tile([-0.6, 0.6], 64)
        w = ComplexWaveform(v, 2.0, 1.0)
        y = apply_tx_impairments(w, TxImpairments(mzm_drive_ratio=0.8)).samples
        k = np.pi * 0.8 / 2
        np.testing.assert_allclose(y, np.sin(k * v.real) / k + 1j * np.sin(k * v.imag) / k, atol=1e-15)

    def test_mzm_small_signal_gain(self):
        assert mzm_transfer(1e-8, 1.2) == pytest.approx(1e-8, rel=1e-12)

    def test_overdrive_rejected(self):
        with pytest.raises(ValueError):
            TxImpairments(mzm_drive_ratio=2.0)

    def test_skew_delays_quadrature(self):
        w = _tone(256, 5)
        y = apply_tx_impairments(w, TxImpairments(iq_skew=1.0)).samples
        np.testing.assert_allclose(y.imag, np.roll(w.samples.imag, 2), atol=1e-12)
        np.testing.assert_allclose(y.real, w.samples.real, atol=1e-12)

    def test_order_skew_before_mixing(self):
        w = modulate(np.random.default_rng(4).normal(size=(256, 2)) @ [1, 1j])
        imp = TxImpairments(iq_gain_imbalance_db=1.0, iq_phase_error_deg=4.0, iq_skew=0.5)
        y = apply_tx_impairments(w, imp).samples
        skew_only = apply_tx_impairments(w, TxImpairments(iq_skew=0.5))
        mixed = apply_tx_impairments(skew_only, TxImpairments(iq_gain_imbalance_db=1.0, iq_phase_error_deg=4.0)).samples
        np.testing.assert_allclose(y, mixed, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(
        st.integers(0, 2**31),
        st.floats(-2, 2),
        st.floats(-10, 10),
        st.floats(-0.4, 0.4),
        st.floats(0, 1.2),
    )
    def test_inverse(self, seed, eps, phi, skew, drive):
        rng = np.random.default_rng(seed)
        w = modulate(rng.normal(size=(256, 2)) @ [1, 1j])
        w = w.with_samples(w.samples * 0.3)
        imp = TxImpairments(iq_gain_imbalance_db=eps, iq_phase_error_deg=phi, iq_skew=skew, mzm_drive_ratio=drive)
        back, clipped = invert_tx_impairments(apply_tx_impairments(w, imp), imp, reg=0)
        assert clipped == 0
        np.testing.assert_allclose(back.samples, w.samples, atol=1e-9)

    def test_eo_response_applied_last(self):
        w = modulate(np.random.default_rng(5).normal(size=(256, 2)) @ [1, 1j])
        eo = FrequencyResponse.from_taps(np.array([0.1j, 1.0, -0.2]), tap_spacing=1.0)
        imp = TxImpairments(eo_response=eo, mzm_drive_ratio=0.5)
        y = apply_tx_impairments(w, imp).samples
        from prsim.signal import apply_response

        z = apply_response(apply_tx_impairments(w, TxImpairments(mzm_drive_ratio=0.5)), eo, mode="circular").samples
        np.testing.assert_allclose(y, z, atol=1e-12)

    def test_deterministic(self):
        w = modulate(np.random.default_rng(6).normal(size=(128, 2)) @ [1, 1j])
        imp = TxImpairments(iq_gain_imbalance_db=0.3, iq_skew=0.2, mzm_drive_ratio=0.4)
        np.testing.assert_array_equal(apply_tx_impairments(w, imp).samples, apply_tx_impairments(w, imp).samples)
