"""Training-based channel estimation for the intensity-only receiver.

Parameters of the forward model are fitted by minimizing the mismatch
between the square-root intensities of the forward-propagated training
sequence and the measured ones. Per-branch receiver responses enter the
model linearly in intensity, so inside every objective evaluation they
can be solved in closed form (variable projection) while the nonlinear
parameters are searched by coordinate descent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import JonesMatrix
from .frontend import FrontendSpec
from .recon import forward_propagate, symbols_to_field
from .signal import DualPolField, FrequencyResponse, fft_freqs
from .txsim import TxImpairments

log = logging.getLogger(__name__)

__all__ = [
    "ChannelState",
    "EstimatorConfig",
    "EstimationResult",
    "intensity_mismatch",
    "model_intensities",
    "estimate_static",
    "estimate_jones",
    "coordinate_descent",
    "fit_rx_responses",
]


@dataclass(frozen=True, eq=False)
class ChannelState:
    """Everything the forward model needs besides the front-end topology.

    ``rx`` holds one real O/E response per branch (None: flat) and
    ``delays`` the delay (symbol periods) of each branch path (None
    entries keep the front-end's nominal value).
    """

    tx: TxImpairments = field(default_factory=TxImpairments)
    total_dispersion_ps_per_nm: float = 0.0
    wavelength_nm: float = 1550.0
    jones: JonesMatrix = field(default_factory=JonesMatrix.identity)
    rx: tuple | None = None
    delays: tuple | None = None

    def __post_init__(self):
        if self.rx is not None:
            rx = tuple(self.rx)
            for r in rx:
                if r.kind != "real":
                    raise ValueError("receiver responses must be real-kind")
            object.__setattr__(self, "rx", rx)
        if self.delays is not None:
            object.__setattr__(self, "delays", tuple(self.delays))

    def rx_responses(self, n_branches):
        if self.rx is None:
            return tuple(FrequencyResponse.identity("real") for _ in range(n_branches))
        if len(self.rx) != n_branches:
            raise ValueError("one receiver response per branch is required")
        return self.rx

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class EstimatorConfig:
    """Bounds, step sizes and staging of the static estimator.

    Stages run in order; each is one of ``"delays"``, ``"dispersion"``
    (dispersion plus closed-form receiver responses) and ``"tx"`` (E/O
    taps, IQ imbalance, skew and MZM drive).
    """

    stages: tuple = ("delays", "dispersion", "tx")
    delay_window_samples: int = 4
    dispersion_bounds_ps_per_nm: tuple = (-1e5, 1e5)
    dispersion_step_ps_per_nm: float = 4.0
    fit_rx: bool = True
    rx_taps: int = 21
    eo_taps: int = 9
    fit_eo: bool = True
    fit_iq: bool = True
    fit_skew: bool = True
    fit_mzm: bool = True
    iq_gain_bounds_db: tuple = (-3.0, 3.0)
    iq_phase_bounds_deg: tuple = (-30.0, 30.0)
    skew_bounds: tuple = (-0.5, 0.5)
    drive_bounds: tuple = (0.0, 1.9)
    eo_tap_bound: float = 0.5
    max_evaluations: int = 4000
    sweeps: int = 40
    tolerance: float = 1e-14
    jones_max_evaluations: int = 200
    jones_grid: tuple = (7, 6)
    margin_symbols: int = 256
    rolloff: float = 0.01

    def __post_init__(self):
        for name in ("dispersion_bounds_ps_per_nm", "iq_gain_bounds_db", "iq_phase_bounds_deg", "skew_bounds", "drive_bounds"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"{name} must be finite with lo < hi")
        if self.rx_taps % 2 == 0 or self.eo_taps % 2 == 0:
            raise ValueError("tap counts must be odd")


@dataclass
class EstimationResult:
    state: ChannelState
    objective: float
    evaluations: int
    converged: bool
    history: list = field(default_factory=list)


# -- objective ------------------------------------------------------------------


def _span_slice(cap, sps):
    a, b = cap.training_span
    if b <= a:
        raise ValueError("capture has no training span")
    if b * sps > cap.n_samples:
        raise ValueError("training span exceeds capture length")
    return a * sps, b * sps


def _training_field(training, cap, rolloff):
    spec = cap.frontend
    sps = int(round(spec.sps))
    a, b = _span_slice(cap, sps)
    t = np.asarray(training)
    if t.shape != (2, (b - a) // sps):
        raise ValueError("training symbols do not match the capture's training span")
    x = symbols_to_field(t, sps, rolloff, spec.symbol_rate)
    if a == 0 and b == cap.n_samples:
        return x, slice(None)
    full = np.zeros((2, cap.n_samples), dtype=np.complex128)
    full[:, a:b] = x
    return full, slice(a, b)


def model_intensities(cs: ChannelState, x, spec: FrontendSpec, transfers=None, rx=True):
    """(2, B, N) forward-model intensities including receiver responses."""
    F = forward_propagate(DualPolField(x, spec.sample_rate, spec.symbol_rate), cs, spec, transfers)
    I = np.abs(F) ** 2
    if rx and cs.rx is not None:
        f = fft_freqs(I.shape[2], spec.sample_rate)
        for b, r in enumerate(cs.rx):
            if not r.is_identity():
                H = r.evaluate(f, spec.symbol_rate)
                I[:, b] = np.fft.ifft(np.fft.fft(I[:, b], axis=1) * H, axis=1).real
    return I


def _mismatch(I_model, meas, sel):
    a = np.sqrt(np.maximum(I_model[..., sel], 0))
    m = np.sqrt(np.maximum(meas[..., sel], 0))
    return float(np.sum(np.mean((a - m) ** 2, axis=(0, 2))))


def _eval_slice(cap, sel, margin_samples):
    if sel == slice(None):
        return sel
    a, b = sel.start + margin_samples, sel.stop - margin_samples
    if b <= a:
        raise ValueError("training span too short for the contamination margin")
    return slice(a, b)


def intensity_mismatch(cs: ChannelState, training, measured, rolloff=0.01, margin_symbols=256):
    """Sum over branches of mean((sqrt(I_model) - sqrt(I_meas))^2) on the training span.

    When the training span is the whole capture (a periodic training
    burst) the model is exact. Otherwise the training is forwarded in a
    zero frame and ``margin_symbols`` at each span edge are excluded.
    """
    cap0 = measured[0]
    for c in measured[1:]:
        if c.training_span != cap0.training_span or c.n_samples != cap0.n_samples:
            raise ValueError("captures disagree on the training span")
    spec = cap0.frontend
    x, sel = _training_field(training, cap0, rolloff)
    sel = _eval_slice(cap0, sel, margin_symbols * int(round(spec.sps)))
    meas = np.stack([c.intensities for c in measured])
    return _mismatch(model_intensities(cs, x, spec), meas, sel)


# -- rx responses by linear least squares ----------------------------------------------


def fit_rx_responses(I_model, meas, n_taps, sps, sel=slice(None)):
    """Per-branch real FIR (sample-spaced) mapping model to measured intensity.

    Both polarizations share the photodiodes and are stacked in the fit.
    Returns (responses, filtered model intensities).
    """
    nb, n = I_model.shape[1], I_model.shape[2]
    half = n_taps // 2
    shifts = np.arange(-half, half + 1)
    out = np.empty_like(I_model)
    resp = []
    full = sel == slice(None)
    if full:
        IM = np.fft.fft(I_model, axis=2)
        ME = np.fft.fft(meas, axis=2)
    for b in range(nb):
        if full:
            # circular normal equations from auto/cross-correlations
            r = np.fft.ifft(np.sum(np.abs(IM[:, b]) ** 2, axis=0)).real
            c = np.fft.ifft(np.sum(np.conj(IM[:, b]) * ME[:, b], axis=0)).real
            G = r[(shifts[None, :] - shifts[:, None]) % n]
            h = np.linalg.solve(G, c[shifts % n])
            k = np.zeros(n)
            k[shifts % n] = h
            out[:, b] = np.fft.ifft(IM[:, b] * np.fft.fft(k)).real
        else:
            cols = np.stack([np.roll(I_model[:, b], k, axis=1) for k in shifts], axis=-1)  # (2, N, T)
            A = cols[:, sel].reshape(-1, n_taps)
            h, *_ = np.linalg.lstsq(A, meas[:, b, sel].reshape(-1), rcond=None)
            out[:, b] = cols @ h
        resp.append(FrequencyResponse.from_taps(h, tap_spacing=1.0 / sps, kind="real"))
    return tuple(resp), out


# -- optimizer ----------------------------------------------------------------------------


class _Budget(Exception):
    pass


def coordinate_descent(f, x0, steps, bounds, max_evaluations=1000, sweeps=50, tolerance=0.0, min_step_ratio=1e-4):
    """Derivative-free coordinate descent with central finite differences.

    For each coordinate a three-point stencil gives slope and curvature; a
    safeguarded Newton step (or the better stencil point) is taken and
    the coordinate's step size adapts to the accepted move. Returns
    (x, f(x), evaluations, converged).
    """
    x = np.array(x0, dtype=float)
    h = np.array(steps, dtype=float)
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    h_min = h * min_step_ratio
    count = 0

    def ev(v):
        nonlocal count
        if count >= max_evaluations:
            raise _Budget
        count += 1
        return f(v)

    x = np.clip(x, lo, hi)
    try:
        fx = ev(x)
        for _ in range(sweeps):
            f_start = fx
            for i in range(x.size):
                if fx <= tolerance:
                    return x, fx, count, True
                xp, xm = x.copy(), x.copy()
                xp[i] = min(x[i] + h[i], hi[i])
                xm[i] = max(x[i] - h[i], lo[i])
                fp, fm = ev(xp), ev(xm)
                dp, dm = xp[i] - x[i], x[i] - xm[i]
                best_x, best_f = x, fx
                if fp < best_f:
                    best_x, best_f = xp, fp
                if fm < best_f:
                    best_x, best_f = xm, fm
                if dp > 0 and dm > 0:
                    g = (fp - fm) / (dp + dm)
                    c = 2 * (dm * (fp - fx) + dp * (fm - fx)) / (dp * dm * (dp + dm))
                    if c > 0:
                        step = float(np.clip(-g / c, -8 * h[i], 8 * h[i]))
                        xn = x.copy()
                        xn[i] = np.clip(x[i] + step, lo[i], hi[i])
                        if xn[i] != x[i]:
                            fn = ev(xn)
                            if fn < best_f:
                                best_x, best_f = xn, fn
                moved = abs(best_x[i] - x[i])
                if best_f < fx:
                    x, fx = best_x, best_f
                    h[i] = max(min(2 * h[i], max(moved, h_min[i]) * 2), h_min[i])
                else:
                    h[i] = max(h[i] / 4, h_min[i])
            if fx <= tolerance:
                return x, fx, count, True
            if f_start - fx <= 1e-12 * max(f_start, 1e-300) and np.all(h <= h_min * 1.0001):
                return x, fx, count, True
    except _Budget:
        return x, fx, count, False
    return x, fx, count, fx <= tolerance


# -- static estimation ----------------------------------------------------------------


def _delay_branches(spec):
    return [i for i, b in enumerate(spec.branches) if any(t.kind == "delay" for t in b.transforms)]


def _nominal_delays(spec, cs):
    if cs.delays is not None:
        return list(cs.delays)
    return [b.delay_symbols() if any(t.kind == "delay" for t in b.transforms) else None for b in spec.branches]


def _tx_from_vector(v, base: TxImpairments, cfg: EstimatorConfig, sym_spacing=1.0):
    k = 0
    eo = base.eo_response
    if cfg.fit_eo:
        n = cfg.eo_taps
        taps = np.zeros(n, dtype=np.complex128)
        taps[n // 2] = 1.0
        others = [i for i in range(n) if i != n // 2]
        for i in others:
            taps[i] = v[k] + 1j * v[k + 1]
            k += 2
        eo = FrequencyResponse.from_taps(taps, tap_spacing=sym_spacing, kind="complex")
        if np.all(taps[others] == 0):
            eo = FrequencyResponse.identity("complex")
    kw = dict(eo_response=eo)
    if cfg.fit_iq:
        kw["iq_gain_imbalance_db"] = float(v[k])
        kw["iq_phase_error_deg"] = float(v[k + 1])
        k += 2
    if cfg.fit_skew:
        kw["iq_skew"] = float(v[k])
        k += 1
    if cfg.fit_mzm:
        kw["mzm_drive_ratio"] = float(v[k])
        k += 1
    return replace(base, **kw)


def _tx_vector(tx: TxImpairments, cfg: EstimatorConfig):
    v, steps, bounds = [], [], []
    if cfg.fit_eo:
        n = cfg.eo_taps
        taps = np.zeros(n, dtype=np.complex128)
        if tx.eo_response.is_taps and tx.eo_response.taps.size == n and tx.eo_response.tap_spacing == 1.0:
            taps = tx.eo_response.taps / tx.eo_response.taps[n // 2]
        for i in range(n):
            if i == n // 2:
                continue
            v += [taps[i].real, taps[i].imag]
            steps += [0.01, 0.01]
            bounds += [(-cfg.eo_tap_bound, cfg.eo_tap_bound)] * 2
    if cfg.fit_iq:
        v += [tx.iq_gain_imbalance_db, tx.iq_phase_error_deg]
        steps += [0.05, 0.5]
        bounds += [cfg.iq_gain_bounds_db, cfg.iq_phase_bounds_deg]
    if cfg.fit_skew:
        v.append(tx.iq_skew)
        steps.append(0.01)
        bounds.append(cfg.skew_bounds)
    if cfg.fit_mzm:
        v.append(tx.mzm_drive_ratio)
        steps.append(0.05)
        bounds.append(cfg.drive_bounds)
    return np.array(v, dtype=float), steps, bounds


class _Problem:
    """Cached pieces of one estimation problem."""

    def __init__(self, training, measured, cfg):
        cap0 = measured[0]
        self.spec = cap0.frontend
        self.sps = int(round(self.spec.sps))
        self.x, sel = _training_field(training, cap0, cfg.rolloff)
        self.sel = _eval_slice(cap0, sel, cfg.margin_symbols * self.sps)
        self.meas = np.stack([c.intensities for c in measured])
        self.cfg = cfg
        self.evaluations = 0

    def objective(self, cs, fit_rx):
        self.evaluations += 1
        I = model_intensities(cs, self.x, self.spec, rx=not fit_rx)
        if fit_rx:
            resp, I = fit_rx_responses(I, self.meas, self.cfg.rx_taps, self.sps, self.sel)
            return _mismatch(I, self.meas, self.sel), resp
        return _mismatch(I, self.meas, self.sel), cs.rx


def estimate_static(training, measured, cfg: EstimatorConfig = EstimatorConfig(), init: ChannelState | None = None):
    """Staged fit of delays, dispersion + receiver responses, and Tx impairments.

    ``training`` is the (2, T) training sequence that occupies each
    capture's training span. Returns an :class:`EstimationResult`; when
    the evaluation budget runs out the best state so far is returned with
    ``converged=False``.
    """
    prob = _Problem(training, measured, cfg)
    spec = prob.spec
    cs = init or ChannelState()
    if cs.delays is None:
        cs = cs.replace(delays=tuple(_nominal_delays(spec, cs)))
    budget = cfg.max_evaluations
    history = []
    fit_rx = cfg.fit_rx
    best, resp = prob.objective(cs, fit_rx)
    if fit_rx:
        cs = cs.replace(rx=resp)
    history.append(("init", best))
    converged = best <= cfg.tolerance

    for stage in cfg.stages:
        if best <= cfg.tolerance:
            break
        if stage == "delays":
            delays = list(cs.delays)
            for b in _delay_branches(spec):
                d0 = delays[b]
                cand = [d0 + k / prob.sps for k in range(-cfg.delay_window_samples, cfg.delay_window_samples + 1)]
                scores = []
                for d in cand:
                    trial = list(delays)
                    trial[b] = d
                    o, _ = prob.objective(cs.replace(delays=tuple(trial)), fit_rx)
                    scores.append(o)
                delays[b] = cand[int(np.argmin(scores))]
            cs = cs.replace(delays=tuple(delays))
            best, resp = prob.objective(cs, fit_rx)
        elif stage == "dispersion":

            def f(v):
                o, _ = prob.objective(cs.replace(total_dispersion_ps_per_nm=float(v[0])), fit_rx)
                return o

            v, best, _, conv = coordinate_descent(
                f,
                [cs.total_dispersion_ps_per_nm],
                [cfg.dispersion_step_ps_per_nm],
                [cfg.dispersion_bounds_ps_per_nm],
                max_evaluations=max(1, budget - prob.evaluations),
                sweeps=cfg.sweeps,
                tolerance=cfg.tolerance,
            )
            cs = cs.replace(total_dispersion_ps_per_nm=float(v[0]))
            best, resp = prob.objective(cs, fit_rx)
        elif stage == "tx":
            v0, steps, bounds = _tx_vector(cs.tx, cfg)
            if v0.size == 0:
                continue
            base = cs

            def f(v):
                o, _ = prob.objective(base.replace(tx=_tx_from_vector(v, base.tx, cfg)), fit_rx)
                return o

            v, best, _, conv = coordinate_descent(
                f, v0, steps, bounds, max_evaluations=max(1, budget - prob.evaluations), sweeps=cfg.sweeps, tolerance=cfg.tolerance
            )
            cs = cs.replace(tx=_tx_from_vector(v, cs.tx, cfg))
            best, resp = prob.objective(cs, fit_rx)
        else:
            raise ValueError(f"unknown estimation stage {stage!r}")
        if fit_rx:
            cs = cs.replace(rx=resp)
        history.append((stage, best))
        log.info("stage %s: objective %.3e after %d evaluations", stage, best, prob.evaluations)
        if prob.evaluations >= budget:
            break
    converged = best <= cfg.tolerance or prob.evaluations < budget
    return EstimationResult(cs, best, prob.evaluations, converged, history)


def estimate_jones(training, measured, static_state: ChannelState, cfg: EstimatorConfig = EstimatorConfig()):
    """Refit only the polarization rotation with every static parameter frozen.

    Intensities are blind to one common phase per received polarization, so
    only the rotation angle and the differential phase are identifiable:
    the matrix is searched as ``JonesMatrix.from_angles(alpha, delta, 0)``.
    A coarse (alpha, delta) grid seeds a coordinate descent; the whole fit
    stays within ``cfg.jones_max_evaluations`` objective evaluations.
    """
    prob = _Problem(training, measured, cfg)
    budget = cfg.jones_max_evaluations
    count = 0

    def f(v):
        nonlocal count
        count += 1
        o, _ = prob.objective(static_state.replace(jones=JonesMatrix.from_angles(v[0], v[1], 0.0)), False)
        return o

    na, nd = cfg.jones_grid
    grid = [(a, d) for a in np.linspace(0, np.pi / 2, na) for d in np.linspace(-np.pi, np.pi, nd, endpoint=False)]
    scores = [f(np.array(g)) for g in grid]
    init0 = f(np.array(_jones_params(static_state.jones)))
    g0 = np.array(grid[int(np.argmin(scores))]) if min(scores) < init0 else np.array(_jones_params(static_state.jones))
    v, best, _, conv = coordinate_descent(
        f, g0, [np.deg2rad(2.0), np.deg2rad(5.0)], [(0.0, np.pi / 2), (-2 * np.pi, 2 * np.pi)],
        max_evaluations=max(1, budget - count), sweeps=cfg.sweeps, tolerance=cfg.tolerance,
    )
    J = JonesMatrix.from_angles(v[0], v[1], 0.0)
    return EstimationResult(static_state.replace(jones=J), best, count, conv, [("init", init0), ("jones", best)])


def _jones_params(J: JonesMatrix):
    a, p1, p2 = J.angles()
    return [a, p1 + p2]
