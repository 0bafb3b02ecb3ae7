"""Dual-polarization PS-QAM transmitter: shaping, framing, modulation, Tx impairments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect

from .signal import ComplexWaveform, FrequencyResponse, apply_response, fractional_delay, rrc_shape

__all__ = [
    "qam_constellation",
    "gray_labels",
    "ShapedSource",
    "sample_mb_distribution",
    "FrameLayout",
    "Frame",
    "draw_frame",
    "modulate",
    "TxImpairments",
    "apply_tx_impairments",
    "invert_tx_impairments",
    "iq_mixing_matrix",
    "mzm_transfer",
    "mzm_inverse",
]

QAM_ORDERS = (4, 16, 64, 256)


def _gray(n):
    return n ^ (n >> 1)


def qam_constellation(order):
    """Square Gray-labelled QAM on the odd-integer grid.

    Point ``k`` carries the bit label of integer ``k`` (MSB first): the
    upper half of the bits selects the in-phase level, the lower half the
    quadrature level, each Gray coded.
    """
    if order not in QAM_ORDERS:
        raise ValueError(f"unsupported QAM order {order}")
    m = int(np.log2(order))
    side = int(np.sqrt(order))
    half = m // 2
    levels = 2 * np.arange(side) - (side - 1)
    # gray-coded index -> level position
    pos = np.empty(side, dtype=int)
    for p in range(side):
        pos[_gray(p)] = p
    k = np.arange(order)
    i_idx = pos[k >> half]
    q_idx = pos[k & (side - 1)]
    return levels[i_idx] + 1j * levels[q_idx]


def gray_labels(order):
    """(order, m) bit matrix; row k is the label of constellation point k."""
    m = int(np.log2(order))
    k = np.arange(order)
    return ((k[:, None] >> np.arange(m - 1, -1, -1)[None, :]) & 1).astype(np.uint8)


def _entropy_bits(p):
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def _mb(energies, nu):
    w = np.exp(-nu * (energies - energies.min()))
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class ShapedSource:
    """Maxwell-Boltzmann shaped QAM source.

    ``points`` are scaled to unit mean power under ``distribution``.
    """

    qam_order: int
    target_entropy: float
    distribution: np.ndarray
    nu: float
    points: np.ndarray
    seed: int = 0

    @property
    def bits_per_symbol(self):
        return int(np.log2(self.qam_order))

    def entropy(self):
        return _entropy_bits(self.distribution)

    def draw(self, n, rng):
        """Indices of ``n`` i.i.d. constellation points."""
        return rng.choice(self.qam_order, size=n, p=self.distribution)


def sample_mb_distribution(qam_order, target_entropy, seed=0):
    """Solve P(c) ~ exp(-nu |c|^2) for the requested entropy by bisection."""
    if qam_order not in (16, 64, 256):
        raise ValueError("shaped sources support 16, 64 and 256 QAM")
    m = np.log2(qam_order)
    if not 2.0 <= target_entropy <= m:
        raise ValueError(f"entropy must lie in [2, {m:g}] bits for {qam_order}QAM")
    c = qam_constellation(qam_order)
    e = np.abs(c) ** 2
    if target_entropy >= m - 1e-12:
        nu = 0.0
        p = np.full(qam_order, 1.0 / qam_order)
    else:
        e_n = e / e.min()

        def gap(v):
            return _entropy_bits(_mb(e_n, v)) - target_entropy

        hi = 1.0
        while gap(hi) > 0:
            hi *= 2
        nu_n = bisect(gap, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        p = _mb(e_n, nu_n)
        nu = nu_n / e.min()
    pts = c / np.sqrt(np.sum(p * e))
    return ShapedSource(qam_order, float(target_entropy), p, float(nu), pts, seed)


@dataclass(frozen=True)
class FrameLayout:
    """Training prefix plus payload with evenly spaced pilots.

    Pilot and training symbols come from fixed seeds of their own, so they
    are the same for every data seed.
    """

    payload_len: int = 4096
    pilot_ratio: float = 0.1
    training_len: int = 8192
    training_order: int = 64
    pilot_seed: int = 0x5EED
    training_seed: int = 0x7EA1

    def __post_init__(self):
        if self.payload_len < 0:
            raise ValueError("payload_len must be >= 0")
        if not 0 <= self.pilot_ratio < 1:
            raise ValueError("pilot_ratio must lie in [0, 1)")
        if self.training_len < 0:
            raise ValueError("training_len must be >= 0")
        if self.payload_len + self.training_len == 0:
            raise ValueError("a frame needs at least one symbol")

    @property
    def pilot_spacing(self):
        return int(round(1 / self.pilot_ratio)) if self.pilot_ratio > 0 else 0

    @property
    def pilot_positions(self):
        """Payload-relative pilot indices."""
        if self.pilot_ratio == 0:
            return np.zeros(0, dtype=int)
        return np.arange(0, self.payload_len, self.pilot_spacing)

    @property
    def frame_len(self):
        return self.training_len + self.payload_len

    def training_sequence(self):
        """(2, training_len) uniform QAM symbols at unit mean power."""
        rng = np.random.default_rng(self.training_seed)
        c = qam_constellation(self.training_order)
        c = c / np.sqrt(np.mean(np.abs(c) ** 2))
        return c[rng.integers(0, self.training_order, size=(2, self.training_len))]

    def pilot_sequence(self, source: ShapedSource):
        """(2, n_pilots) outer-ring QPSK points of the payload constellation."""
        rng = np.random.default_rng(self.pilot_seed)
        amp = np.max(np.abs(source.points.real))
        q = rng.integers(0, 4, size=(2, self.pilot_positions.size))
        return amp * np.sqrt(2) * np.exp(1j * (np.pi / 4 + np.pi / 2 * q))


@dataclass(frozen=True, eq=False)
class Frame:
    """Transmitted symbols with everything needed to score them.

    ``symbols`` (2, frame_len) is scaled per polarization (``scale``) so
    that the shaped field has unit mean power;
    ``labels`` holds constellation indices of the payload (-1 at pilots).
    """

    symbols: np.ndarray
    labels: np.ndarray
    layout: FrameLayout
    source: ShapedSource
    scale: np.ndarray
    seed: int

    @property
    def training(self):
        return self.symbols[:, : self.layout.training_len]

    @property
    def payload(self):
        return self.symbols[:, self.layout.training_len :]

    @property
    def pilot_index(self):
        """Frame-relative pilot indices."""
        return self.layout.training_len + self.layout.pilot_positions

    def known_mask(self, include_training=True):
        """Boolean (frame_len,) mask of symbols known to the receiver."""
        m = np.zeros(self.layout.frame_len, dtype=bool)
        m[self.pilot_index] = True
        if include_training:
            m[: self.layout.training_len] = True
        return m

    def data_mask(self):
        """Payload-relative mask of data (non-pilot) symbols."""
        m = np.ones(self.layout.payload_len, dtype=bool)
        m[self.layout.pilot_positions] = False
        return m


def draw_frame(src: ShapedSource, layout: FrameLayout, seed=None, rolloff=0.01):
    """Training prefix and pilot-bearing payload, scaled per polarization.

    Each polarization is scaled so that its ideally RRC-shaped field has
    unit mean power; ``Frame.scale`` holds the two factors.
    """
    seed = src.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    idx = np.stack([src.draw(layout.payload_len, rng) for _ in range(2)])
    payload = src.points[idx]
    pp = layout.pilot_positions
    payload[:, pp] = layout.pilot_sequence(src)
    idx[:, pp] = -1
    sym = np.concatenate([layout.training_sequence(), payload], axis=1)
    # per-pol scale giving the shaped field exactly unit power, so modulate's
    # own normalization is a no-op and symbols map one-to-one onto the field
    p = np.array([2 * rrc_shape(r, 2, rolloff).mean_power() for r in sym])
    scale = 1.0 / np.sqrt(p)
    return Frame(sym * scale[:, None], idx, layout, src, scale, int(seed))


def modulate(symbols, sps=2, rolloff=0.01, symbol_rate=100e9, span=None):
    """RRC-shaped waveform at unit mean power."""
    w = rrc_shape(symbols, sps, rolloff, span=span, symbol_rate=symbol_rate)
    p = w.mean_power()
    if p == 0:
        return w
    return w.with_samples(w.samples / np.sqrt(p))


@dataclass(frozen=True)
class TxImpairments:
    """Field-level transmitter distortions.

    Gain imbalance splits symmetrically (+eps/2 dB on I, -eps/2 dB on Q);
    the phase error rotates I by -phi/2 and Q by +phi/2. ``iq_skew`` delays
    Q relative to I in symbol periods. The MZM acts per quadrature as
    v -> sin(k v)/k with k = pi * drive_ratio / 2 (unit small-signal gain).
    """

    eo_response: FrequencyResponse = field(default_factory=lambda: FrequencyResponse.identity("complex"))
    iq_gain_imbalance_db: float = 0.0
    iq_phase_error_deg: float = 0.0
    iq_skew: float = 0.0
    mzm_drive_ratio: float = 0.0

    def __post_init__(self):
        if self.eo_response.kind != "complex":
            raise ValueError("the E/O response is complex-valued")
        if not 0 <= self.mzm_drive_ratio < 2:
            raise ValueError("mzm_drive_ratio must lie in [0, 2)")

    def is_neutral(self):
        return (
            self.eo_response.is_identity()
            and self.iq_gain_imbalance_db == 0
            and self.iq_phase_error_deg == 0
            and self.iq_skew == 0
            and self.mzm_drive_ratio == 0
        )


def iq_mixing_matrix(gain_db, phase_deg):
    """Real 2x2 map (I, Q) -> (Re, Im) of the IQ modulator."""
    gi = 10 ** (gain_db / 40)
    gq = 10 ** (-gain_db / 40)
    h = np.deg2rad(phase_deg) / 2
    return np.array([[gi * np.cos(h), -gq * np.sin(h)], [-gi * np.sin(h), gq * np.cos(h)]])


def mzm_transfer(v, drive_ratio):
    """sin(k v)/k with k = pi*drive/2, written as v*sinc so tiny drives stay exact."""
    if drive_ratio == 0:
        return v
    return v * np.sinc(drive_ratio * np.asarray(v) / 2)


def mzm_inverse(y, drive_ratio):
    """Arcsine inverse on the monotonic branch; returns (v, n_clipped)."""
    if drive_ratio == 0:
        return y, 0
    k = np.pi * drive_ratio / 2
    y = np.asarray(y)
    a = k * y
    over = np.abs(a) > 1
    clipped = int(np.count_nonzero(over))
    a = np.clip(a, -1, 1)
    small = np.abs(a) < 1e-4
    # arcsin(a)/a, with its series where the ratio would lose precision
    r = np.where(small, 1 + a**2 / 6, np.arcsin(a) / np.where(small, 1, a))
    v = y * r
    if clipped:
        v[over] = np.sign(y[over]) * (np.pi / 2) / k
    return v, clipped


def apply_tx_impairments(field: ComplexWaveform, imp: TxImpairments, mode="circular"):
    """Skew -> IQ gain/phase mixing -> MZM -> E/O filtering, in that order."""
    x = field.samples
    i, q = x.real, x.imag
    if imp.iq_skew:
        q = fractional_delay(q, imp.iq_skew * field.sps)
    M = iq_mixing_matrix(imp.iq_gain_imbalance_db, imp.iq_phase_error_deg)
    re = M[0, 0] * i + M[0, 1] * q
    im = M[1, 0] * i + M[1, 1] * q
    y = mzm_transfer(re, imp.mzm_drive_ratio) + 1j * mzm_transfer(im, imp.mzm_drive_ratio)
    out = field.with_samples(y)
    if not imp.eo_response.is_identity():
        out = apply_response(out, imp.eo_response, mode=mode)
    return out


def invert_tx_impairments(field: ComplexWaveform, imp: TxImpairments, reg=1e-3):
    """Reverse chain: regularized E/O inverse, arcsine, IQ unmixing, skew removal.

    Returns (waveform, number of arcsine-clipped samples).
    """
    x = field.samples
    if not imp.eo_response.is_identity():
        from .signal import fft_freqs

        H = imp.eo_response.evaluate(fft_freqs(x.size, field.sample_rate), field.symbol_rate)
        x = np.fft.ifft(np.fft.fft(x) * np.conj(H) / (np.abs(H) ** 2 + reg))
    re, c1 = mzm_inverse(x.real, imp.mzm_drive_ratio)
    im, c2 = mzm_inverse(x.imag, imp.mzm_drive_ratio)
    Minv = np.linalg.inv(iq_mixing_matrix(imp.iq_gain_imbalance_db, imp.iq_phase_error_deg))
    i = Minv[0, 0] * re + Minv[0, 1] * im
    q = Minv[1, 0] * re + Minv[1, 1] * im
    if imp.iq_skew:
        q = fractional_delay(q, -imp.iq_skew * field.sps)
    return field.with_samples(i + 1j * q), c1 + c2
