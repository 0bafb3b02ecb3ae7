"""Channel-aware Gerchberg-Saxton field reconstruction from intensity captures.

The forward operator maps a candidate transmit field through the Tx
impairment model, fiber dispersion, the Jones matrix and the front-end
branch transfer functions. The backward operator reverses it: branch
fields of one received polarization are combined by per-frequency
weighted least squares (which inverts every LTI branch jointly), then the
Jones matrix, dispersion and Tx model are undone.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .channel import cd_transfer
from .frontend import FrontendSpec, IntensityCapture, branch_transfer
from .metrics import recovery_snr
from .signal import (
    ComplexWaveform,
    DualPolField,
    FrequencyResponse,
    apply_response,
    fft_freqs,
    matched_filter,
    rrc_shape,
)
from .txsim import apply_tx_impairments, invert_tx_impairments

log = logging.getLogger(__name__)

__all__ = [
    "ReconstructionError",
    "GsConfig",
    "GsTrace",
    "FieldEstimate",
    "PilotAlignment",
    "ffe_design",
    "ffe_calibrate_and_equalize",
    "forward_propagate",
    "backward_propagate",
    "field_to_symbols",
    "symbols_to_field",
    "pilot_phase_align",
    "gs_reconstruct",
]


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class GsConfig:
    """Solver settings.

    ``momentum`` extrapolates the iterate before each forward pass
    (0 gives the plain alternating projection). Phase resets act on data
    symbols whose distance to the nearest constellation point is above
    the ``reset_percentile``-th percentile.
    """

    max_iterations: int = 100
    rolloff: float = 0.01
    bandwidth_limit_hz: float | None = None
    reset_iterations: tuple = (10, 20, 30)
    reset_percentile: float = 80.0
    momentum: float = 0.9
    use_training: bool = True
    branch_weights: tuple | None = None
    polarization_mode: str = "joint"
    early_stop_tol: float | None = 1e-6
    early_stop_window: int = 5
    eo_regularization: float = 1e-3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.polarization_mode not in ("joint", "per_pol"):
            raise ValueError("polarization_mode must be 'joint' or 'per_pol'")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.reset_percentile <= 100:
            raise ValueError("reset_percentile must lie in [0, 100]")
        object.__setattr__(self, "reset_iterations", tuple(int(i) for i in self.reset_iterations))

    def bandwidth(self, symbol_rate, sample_rate):
        bw = self.bandwidth_limit_hz if self.bandwidth_limit_hz is not None else (1 + self.rolloff) * symbol_rate / 2
        if bw > sample_rate / 2:
            raise ValueError("bandwidth limit exceeds Nyquist")
        return bw


@dataclass
class GsTrace:
    objective: list = field(default_factory=list)
    snr_db: list = field(default_factory=list)
    stopped_early: bool = False
    arcsine_clipped: int = 0

    @property
    def iterations(self):
        return len(self.objective)

    def rows(self):
        snr = self.snr_db if self.snr_db else [float("nan")] * len(self.objective)
        return [(i + 1, o, s) for i, (o, s) in enumerate(zip(self.objective, snr))]


@dataclass(frozen=True, eq=False)
class FieldEstimate:
    """Reconstructed transmit field and recovered payload.

    ``symbols`` is (2, payload_len), pilot-phase aligned per polarization;
    ``valid`` marks symbols usable for scoring.
    """

    field: DualPolField
    symbols: np.ndarray
    valid: np.ndarray
    phase: tuple = (0.0, 0.0)
    low_confidence: bool = False


@dataclass(frozen=True)
class PilotAlignment:
    symbols: np.ndarray
    theta: float | np.ndarray
    correlation: float
    low_confidence: bool


# -- FFE -------------------------------------------------------------------------


def ffe_design(response: FrequencyResponse, symbol_rate, n_taps=101, tap_spacing=0.5, max_gain_db=20.0, grid=4096):
    """Capped-inverse FFE of a real O/E response.

    The target 1/H is clipped to ``max_gain_db`` in magnitude and sampled on
    the tap grid's periodic band; the taps are the least-squares (truncated
    Fourier series) fit, so a flat response yields the identity exactly.
    """
    if n_taps % 2 == 0:
        raise ValueError("FFE tap count must be odd")
    if response.is_identity():
        taps = np.zeros(n_taps)
        taps[n_taps // 2] = 1.0
        return FrequencyResponse.from_taps(taps, tap_spacing, kind="real")
    fs_tap = symbol_rate / tap_spacing
    f = fft_freqs(grid, fs_tap)
    H = response.evaluate(f, symbol_rate)
    cap = 10 ** (max_gain_db / 20)
    mag = np.abs(H)
    weak = mag < 1 / cap
    if np.any(weak):
        warnings.warn(f"O/E response falls below the {max_gain_db:g} dB inverse cap; using capped inverse", RuntimeWarning, stacklevel=2)
    D = np.where(weak, np.exp(-1j * np.angle(H)) * cap, 1 / np.where(weak, 1, H))
    d = np.fft.ifft(D).real
    half = n_taps // 2
    taps = np.concatenate([d[-half:], d[: half + 1]])
    return FrequencyResponse.from_taps(taps, tap_spacing, kind="real")


def ffe_calibrate_and_equalize(capture: IntensityCapture, rx_responses, n_taps=101, tap_spacing=0.5, max_gain_db=20.0, mode="circular"):
    """Equalize every branch with an FFE built from its O/E response."""
    fe = capture.frontend
    rows = []
    for b, resp in enumerate(rx_responses):
        if resp.is_identity():
            rows.append(capture.intensities[b].copy())
            continue
        taps = ffe_design(resp, fe.symbol_rate, n_taps, tap_spacing, max_gain_db)
        rows.append(apply_response(capture.branch(b), taps, mode=mode).samples)
    return capture.with_intensities(np.vstack(rows))


# -- forward / backward ------------------------------------------------------------


def _spec_for(cs, spec: FrontendSpec):
    delays = getattr(cs, "delays", None)
    return spec.with_delays(delays) if delays is not None else spec


def _tx_forward(x, cs, sample_rate, symbol_rate):
    if cs.tx.is_neutral():
        return x
    return np.vstack([apply_tx_impairments(ComplexWaveform(x[p], sample_rate, symbol_rate), cs.tx).samples for p in range(2)])


def forward_propagate(candidate: DualPolField, cs, spec: FrontendSpec, transfers=None):
    """(2, B, N) pre-detection branch fields for a transmit-field candidate."""
    n = len(candidate)
    x = _tx_forward(candidate.samples, cs, candidate.sample_rate, candidate.symbol_rate)
    X = np.fft.fft(x, axis=1)
    if cs.total_dispersion_ps_per_nm:
        X = X * cd_transfer(fft_freqs(n, candidate.sample_rate), cs.total_dispersion_ps_per_nm, cs.wavelength_nm)
    R = cs.jones.matrix @ X
    Hb = branch_transfer(_spec_for(cs, spec), n) if transfers is None else transfers
    return np.fft.ifft(R[:, None, :] * Hb[None, :, :], axis=2)


def _combine(FB, Hb, weights):
    """Weighted LS estimate of each received field from its branch fields (frequency domain)."""
    w = np.ones(Hb.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    num = np.einsum("b,bn,pbn->pn", w, np.conj(Hb), FB)
    den = np.einsum("b,bn->n", w, np.abs(Hb) ** 2)
    tiny = 1e-12 * den.max()
    return np.where(den > tiny, num / np.where(den > tiny, den, 1), 0)


def _rx_to_tx(R, cs, sample_rate, symbol_rate, reg=1e-3):
    """Frequency-domain received fields -> transmit-field candidate samples; returns (x, clipped)."""
    n = R.shape[1]
    X = cs.jones.matrix.conj().T @ R
    if cs.total_dispersion_ps_per_nm:
        X = X * np.conj(cd_transfer(fft_freqs(n, sample_rate), cs.total_dispersion_ps_per_nm, cs.wavelength_nm))
    x = np.fft.ifft(X, axis=1)
    if cs.tx.is_neutral():
        return x, 0
    out = np.empty_like(x)
    clipped = 0
    for p in range(2):
        w, c = invert_tx_impairments(ComplexWaveform(x[p], sample_rate, symbol_rate), cs.tx, reg=reg)
        out[p] = w.samples
        clipped += c
    return out, clipped


def backward_propagate(branch_fields, cs, spec: FrontendSpec, weights=None, symbol_rate=None, transfers=None, reg=1e-3, return_clipped=False):
    """Invert branch fields (2, B, N) back to a transmit-field candidate.

    Branch estimates are merged with weights ``weights`` (equal by
    default); with a one-hot weight vector the result is the inversion of
    that single branch.
    """
    fb = np.asarray(branch_fields)
    n = fb.shape[2]
    Hb = branch_transfer(_spec_for(cs, spec), n) if transfers is None else transfers
    R = _combine(np.fft.fft(fb, axis=2), Hb, weights)
    sr = symbol_rate or spec.symbol_rate
    x, clipped = _rx_to_tx(R, cs, spec.sample_rate, sr, reg)
    out = DualPolField(x, spec.sample_rate, sr)
    if clipped:
        log.debug("arcsine inverse clipped %d samples", clipped)
    return (out, clipped) if return_clipped else out


# -- symbols <-> field ----------------------------------------------------------------


def field_to_symbols(x, sample_rate, symbol_rate, rolloff):
    """Matched-filter a (2, N) field (or 1-D) to symbols, undoing the unit-power scaling of modulate."""
    x = np.atleast_2d(x)
    sps = sample_rate / symbol_rate
    out = np.vstack([matched_filter(ComplexWaveform(r, sample_rate, symbol_rate), rolloff) for r in x])
    return out / np.sqrt(sps)


def symbols_to_field(s, sps, rolloff, symbol_rate):
    s = np.atleast_2d(s)
    return np.vstack([rrc_shape(r, sps, rolloff, symbol_rate=symbol_rate).samples for r in s]) * np.sqrt(sps)


# -- pilots -------------------------------------------------------------------------------


def pilot_phase_align(symbols, pilot_positions, pilot_values, block=None, threshold=0.5):
    """Remove the global phase arg(sum rx * conj(tx)) measured on pilots.

    With ``block`` (pilots per block) the phase is estimated piecewise and
    ``theta`` is the per-symbol phase removed. Frames whose normalized
    pilot correlation falls below ``threshold`` are flagged.
    """
    s = np.asarray(symbols, dtype=np.complex128)
    pp = np.asarray(pilot_positions, dtype=int)
    pv = np.asarray(pilot_values, dtype=np.complex128)
    if pp.size == 0:
        raise ValueError("pilot alignment needs at least one pilot")
    rx = s[pp]
    c = np.sum(rx * np.conj(pv))
    norm = np.sqrt(np.sum(np.abs(rx) ** 2) * np.sum(np.abs(pv) ** 2))
    rho = float(np.abs(c) / norm) if norm > 0 else 0.0
    if block is None:
        theta = float(np.angle(c))
        return PilotAlignment(s * np.exp(-1j * theta), theta, rho, rho < threshold)
    nb = int(np.ceil(pp.size / block))
    thetas = np.empty(nb)
    centers = np.empty(nb)
    for k in range(nb):
        sl = slice(k * block, (k + 1) * block)
        thetas[k] = np.angle(np.sum(rx[sl] * np.conj(pv[sl])))
        centers[k] = pp[sl].mean()
    thetas = np.unwrap(thetas)
    th = np.interp(np.arange(s.size), centers, thetas) if nb > 1 else np.full(s.size, thetas[0])
    return PilotAlignment(s * np.exp(-1j * th), th, rho, rho < threshold)


# -- GS loop -----------------------------------------------------------------------------------


def _direct_branch(spec):
    for i, b in enumerate(spec.branches):
        if not b.transforms and b.combine_with is None:
            return i
    return 0


def gs_reconstruct(captures, cs, cfg: GsConfig, frame, init: DualPolField | None = None, reference=True, callback=None):
    """Reconstruct the dual-pol transmit field from two equalized captures.

    Parameters
    ----------
    captures : sequence of two IntensityCapture
        Received-polarization captures, already FFE-equalized.
    cs : ChannelState
        Channel model used by the forward/backward operators.
    cfg : GsConfig
    frame : Frame
        Supplies the frame layout, known symbols (pilots, optionally the
        training prefix) and the payload constellation. Its payload is only
        used to fill the SNR trace when ``reference`` is true.
    init : DualPolField, optional
        Starting candidate; by default the direct-branch amplitude with
        zero phase, mapped back to the transmitter.

    Returns
    -------
    (FieldEstimate, GsTrace)
    """
    spec = captures[0].frontend
    fs, rs = spec.sample_rate, spec.symbol_rate
    sps = int(round(fs / rs))
    n = captures[0].n_samples
    lay = frame.layout
    if n != lay.frame_len * sps:
        raise ValueError("capture length does not match the frame layout")
    meas = np.stack([c.intensities for c in captures])
    amp = np.sqrt(np.maximum(meas, 0))
    Hb = branch_transfer(_spec_for(cs, spec), n)
    bw = cfg.bandwidth(rs, fs)
    in_band = np.abs(fft_freqs(n, fs)) <= bw
    joint = cfg.polarization_mode == "joint"

    known = frame.known_mask(include_training=cfg.use_training)
    known_vals = frame.symbols[:, known]
    data_idx = lay.training_len + np.flatnonzero(frame.data_mask())
    const = frame.source.points[None, :] * np.asarray(frame.scale).reshape(-1, 1)
    ref = frame.symbols[:, data_idx] if reference else None

    trace = GsTrace()
    if init is None:
        d = _direct_branch(spec)
        w = np.zeros(spec.n_branches)
        w[d] = 1.0
        R = _combine(np.fft.fft(amp.astype(np.complex128), axis=2), Hb, w)
        x = _rx_to_tx(R, cs, fs, rs, cfg.eo_regularization)[0] if joint else np.fft.ifft(R, axis=1)
    else:
        x = np.array(init.samples, dtype=np.complex128)
    x_prev = x.copy()

    def constrain(z, it):
        Z = np.fft.fft(z, axis=1)
        Z[:, ~in_band] = 0
        z = np.fft.ifft(Z, axis=1)
        if not joint:
            return z
        s = field_to_symbols(z, fs, rs, cfg.rolloff)
        tgt = s.copy()
        tgt[:, known] = known_vals
        if it in cfg.reset_iterations:
            _phase_reset(tgt, data_idx, const, cfg.reset_percentile)
        return z + symbols_to_field(tgt - s, sps, cfg.rolloff, rs)

    for it in range(1, cfg.max_iterations + 1):
        y = x + cfg.momentum * (x - x_prev) if cfg.momentum else x
        if joint:
            F = forward_propagate(DualPolField(y, fs, rs), cs, spec, transfers=Hb)
        else:
            F = np.fft.ifft(np.fft.fft(y, axis=1)[:, None, :] * Hb[None], axis=2)
        mag = np.abs(F)
        obj = float(np.sum(np.mean((mag - amp) ** 2, axis=2)))
        if not np.isfinite(obj):
            raise ReconstructionError(f"non-finite iterate at iteration {it}")
        trace.objective.append(obj)
        unit = np.where(mag > 0, F / np.where(mag > 0, mag, 1), 1.0)
        G = amp * unit
        if joint:
            R = _combine(np.fft.fft(G, axis=2), Hb, cfg.branch_weights)
            z, clipped = _rx_to_tx(R, cs, fs, rs, cfg.eo_regularization)
            trace.arcsine_clipped += clipped
        else:
            z = np.fft.ifft(_combine(np.fft.fft(G, axis=2), Hb, cfg.branch_weights), axis=1)
        x_prev, x = x, constrain(z, it)
        if ref is not None:
            sx = _final_symbols(x, cs, fs, rs, cfg, frame) if not joint else field_to_symbols(x, fs, rs, cfg.rolloff)
            trace.snr_db.append(float(np.mean([recovery_snr(sx[p, data_idx], ref[p]) for p in range(2)])))
        if callback is not None:
            callback(it, obj)
        if cfg.early_stop_tol is not None and it > cfg.early_stop_window:
            o_old = trace.objective[-1 - cfg.early_stop_window]
            if o_old > 1e-300 and abs(o_old - obj) / o_old < cfg.early_stop_tol:
                trace.stopped_early = True
                break

    if joint:
        xt = x
    else:
        xt = _per_pol_to_tx(x, cs, fs, rs, cfg, frame)
    est_field = DualPolField(xt, fs, rs)
    s = field_to_symbols(xt, fs, rs, cfg.rolloff)[:, lay.training_len :]
    pp = lay.pilot_positions
    out = np.empty_like(s)
    phases = []
    low = False
    for p in range(2):
        if pp.size:
            a = pilot_phase_align(s[p], pp, frame.payload[p, pp])
            out[p] = a.symbols
            phases.append(a.theta)
            low = low or a.low_confidence
        else:
            out[p] = s[p]
            phases.append(0.0)
    valid = np.ones(lay.payload_len, dtype=bool)
    return FieldEstimate(est_field, out, valid, tuple(phases), low), trace


def _phase_reset(tgt, data_idx, const, percentile):
    """Snap the phase of the least reliable data symbols to their nearest constellation point."""
    for p in range(tgt.shape[0]):
        s = tgt[p, data_idx]
        c = const[p] if const.ndim == 2 else const
        d = np.abs(s[:, None] - c[None, :])
        k = np.argmin(d, axis=1)
        dmin = d[np.arange(s.size), k]
        sel = dmin > np.percentile(dmin, percentile)
        s[sel] = np.abs(s[sel]) * np.exp(1j * np.angle(c[k[sel]]))
        tgt[p, data_idx] = s


def _per_pol_to_tx(xr, cs, fs, rs, cfg, frame):
    """Map independently reconstructed received fields to the transmitter.

    Each received polarization carries an unknown global phase; the two
    complex coefficients are fitted on the known symbols by least squares.
    """
    n = xr.shape[1]
    X = np.fft.fft(xr, axis=1)
    if cs.total_dispersion_ps_per_nm:
        X = X * np.conj(cd_transfer(fft_freqs(n, fs), cs.total_dispersion_ps_per_nm, cs.wavelength_nm))
    u = np.fft.ifft(X, axis=1)
    Jh = cs.jones.matrix.conj().T
    known = frame.known_mask(include_training=cfg.use_training)
    su = field_to_symbols(u, fs, rs, cfg.rolloff)[:, known]
    A = np.concatenate([Jh[0][None, :].T * su, Jh[1][None, :].T * su], axis=1).T  # (2K, 2)
    b = np.concatenate([frame.symbols[0, known], frame.symbols[1, known]])
    c, *_ = np.linalg.lstsq(A, b, rcond=None)
    x = Jh @ (c[:, None] * u)
    if cs.tx.is_neutral():
        return x
    X2 = np.fft.fft(cs.jones.matrix @ x, axis=1)
    if cs.total_dispersion_ps_per_nm:
        X2 = X2 * cd_transfer(fft_freqs(n, fs), cs.total_dispersion_ps_per_nm, cs.wavelength_nm)
    out, _ = _rx_to_tx(X2, cs, fs, rs, cfg.eo_regularization)
    return out


def _final_symbols(xr, cs, fs, rs, cfg, frame):
    return field_to_symbols(_per_pol_to_tx(xr, cs, fs, rs, cfg, frame), fs, rs, cfg.rolloff)
