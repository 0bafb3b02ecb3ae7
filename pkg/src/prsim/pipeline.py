"""End-to-end chain: tx -> channel -> front-end -> (estimate) -> FFE -> GS -> metrics.

Each stage is a plain function over in-memory objects; the CLI writes the
same objects to disk between stages, so a resumed run reproduces the
in-process result bit for bit.
"""

from __future__ import annotations

import contextlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .chanest import ChannelState, EstimatorConfig, estimate_jones, estimate_static
from .channel import FiberSpec, JonesMatrix, NoiseSpec, add_ase, apply_cd_dp, apply_jones
from .config import ConfigError, ExperimentConfig, config_hash, config_to_dict, derive_seed
from .frontend import BranchSpec, FrontendSpec, IntensityCapture, capture, default_frontend
from .metrics import ScoreReport, score_payload
from .recon import GsConfig, GsTrace, ffe_calibrate_and_equalize, gs_reconstruct
from .signal import DualPolField, FrequencyResponse
from .txsim import Frame, FrameLayout, TxImpairments, apply_tx_impairments, draw_frame, modulate, sample_mb_distribution

log = logging.getLogger(__name__)

__all__ = [
    "StageError",
    "FrameResult",
    "RunResult",
    "SWEEP_AXES",
    "SWEEP_HEADER",
    "build_source",
    "build_layout",
    "build_frame",
    "training_layout",
    "true_frontend",
    "receiver_frontend",
    "true_state",
    "nominal_state",
    "gs_config",
    "transmit",
    "stage_capture",
    "stage_estimate",
    "stage_reconstruct",
    "stage_score",
    "run",
    "sweep",
    "provenance",
]


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(stage, cause)
        self.stage = stage
        self.cause = cause

    def __str__(self):
        return f"stage '{self.stage}' failed: {self.cause}"


@contextlib.contextmanager
def _stage(name):
    try:
        yield
    except (StageError, ConfigError):
        raise
    except Exception as e:  # noqa: BLE001 - attribute every failure to its stage
        raise StageError(name, e) from e


def provenance(cfg):
    return {"config_hash": config_hash(cfg), "tool_version": __version__}


# -- building blocks ---------------------------------------------------------------------


def build_source(cfg: ExperimentConfig):
    return sample_mb_distribution(cfg.tx.qam_order, cfg.tx.entropy)


def build_layout(cfg: ExperimentConfig):
    t = cfg.tx
    return FrameLayout(t.payload_symbols, t.pilot_ratio, t.training_symbols, t.training_order)


def training_layout(cfg: ExperimentConfig):
    """Periodic training burst used for channel estimation."""
    return FrameLayout(0, 0.0, cfg.estimator.training_symbols, cfg.tx.training_order)


def build_frame(cfg: ExperimentConfig, index=0):
    return draw_frame(build_source(cfg), build_layout(cfg), derive_seed(cfg.seed, "frame", index), cfg.rolloff)


def _oe_response(cfg: ExperimentConfig):
    f3 = cfg.frontend.oe_3db_ghz
    if f3 is None:
        return FrequencyResponse.identity("real")
    # Gaussian power response with its 3 dB point at f3
    fn = np.linspace(0, cfg.sps, 1025)
    a = f3 / cfg.symbol_rate_gbaud
    return FrequencyResponse.from_spectrum(fn, np.exp(-np.log(2) / 2 * (fn / a) ** 2), kind="real")


def _with_noise(spec: FrontendSpec, cfg: ExperimentConfig):
    fe = cfg.frontend
    if fe.thermal_noise_std == 0 and fe.adc_bits is None:
        return spec
    out = tuple(
        BranchSpec(b.label, b.transforms, b.combine_with, b.coupler_ratio, b.oe_response, fe.thermal_noise_std, fe.adc_bits, None)
        for b in spec.branches
    )
    return FrontendSpec(out, spec.sample_rate, spec.symbol_rate, spec.wavelength_nm)


def true_frontend(cfg: ExperimentConfig):
    fe = cfg.frontend
    delays = fe.true_delays_symbols or fe.delays_symbols
    spec = default_frontend(cfg.symbol_rate, cfg.sps, fe.dispersion_ps_per_nm, tuple(fe.delays_symbols), _oe_response(cfg))
    spec = spec.with_delays([None, None, delays[0], delays[1]])
    return _with_noise(spec, cfg)


def receiver_frontend(cfg: ExperimentConfig):
    """The receiver's nominal view of the front-end (design delays, flat O/E)."""
    fe = cfg.frontend
    return default_frontend(cfg.symbol_rate, cfg.sps, fe.dispersion_ps_per_nm, tuple(fe.delays_symbols))


def _jones(cfg: ExperimentConfig):
    ch = cfg.channel
    if ch.jones_angles_rad is not None:
        return JonesMatrix.from_angles(*ch.jones_angles_rad)
    if ch.jones_seed is not None:
        return JonesMatrix.random(np.random.default_rng(ch.jones_seed))
    return JonesMatrix.identity()


def _tx_impairments(cfg: ExperimentConfig):
    t = cfg.tx
    eo = FrequencyResponse.identity("complex")
    if t.eo_taps_re is not None:
        eo = FrequencyResponse.from_taps(np.array(t.eo_taps_re) + 1j * np.array(t.eo_taps_im), tap_spacing=1.0, kind="complex")
    return TxImpairments(eo, t.iq_gain_imbalance_db, t.iq_phase_error_deg, t.iq_skew_symbols, t.mzm_drive_ratio)


def _fiber(cfg):
    ch = cfg.channel
    return FiberSpec(ch.length_km, ch.dispersion_ps_per_nm_km, ch.wavelength_nm)


def true_state(cfg: ExperimentConfig):
    spec = true_frontend(cfg)
    return ChannelState(
        tx=_tx_impairments(cfg),
        total_dispersion_ps_per_nm=_fiber(cfg).total_dispersion_ps_per_nm,
        wavelength_nm=cfg.channel.wavelength_nm,
        jones=_jones(cfg),
        rx=tuple(b.oe_response for b in spec.branches),
        delays=tuple(b.delay_symbols() if any(t.kind == "delay" for t in b.transforms) else None for b in spec.branches),
    )


def nominal_state(cfg: ExperimentConfig):
    """Initial guess for estimation: neutral Tx, nominal fiber, identity Jones."""
    d0 = cfg.estimator.init_dispersion_ps_per_nm
    d0 = _fiber(cfg).total_dispersion_ps_per_nm if d0 is None else d0
    fe = cfg.frontend
    return ChannelState(
        total_dispersion_ps_per_nm=float(d0),
        wavelength_nm=cfg.channel.wavelength_nm,
        delays=(None, None, float(fe.delays_symbols[0]), float(fe.delays_symbols[1])),
    )


def gs_config(cfg: ExperimentConfig):
    g = cfg.gs
    return GsConfig(
        max_iterations=g.iterations,
        rolloff=cfg.rolloff,
        reset_iterations=g.reset_iterations,
        reset_percentile=g.reset_percentile,
        momentum=g.momentum,
        use_training=g.use_training,
        polarization_mode=g.polarization_mode,
        early_stop_tol=g.early_stop_tol,
    )


def transmit(frame: Frame, cfg: ExperimentConfig, tag):
    """Simulate the physical link for ``frame``; captures carry the receiver's nominal front-end."""
    rs = cfg.symbol_rate
    imp = _tx_impairments(cfg)
    pols = [modulate(frame.symbols[p], cfg.sps, cfg.rolloff, rs) for p in range(2)]
    if not imp.is_neutral():
        pols = [apply_tx_impairments(w, imp) for w in pols]
    dp = DualPolField.from_pols(*pols)
    dp = apply_jones(apply_cd_dp(dp, _fiber(cfg).total_dispersion_ps_per_nm, cfg.channel.wavelength_nm), _jones(cfg))
    osnr = cfg.channel.osnr()
    if np.isfinite(osnr):
        dp = add_ase(dp, NoiseSpec(osnr, derive_seed(cfg.seed, "ase", tag)), rs)
    lay = frame.layout
    spans = dict(training_span=(0, lay.training_len), payload_span=(lay.training_len, lay.frame_len))
    caps = capture(dp, true_frontend(cfg), seed=derive_seed(cfg.seed, "frontend", tag), **spans)
    rx = receiver_frontend(cfg)
    return [IntensityCapture(c.intensities, rx, c.training_span, c.payload_span, c.polarization) for c in caps]


# -- stages ---------------------------------------------------------------------------------


def stage_capture(cfg: ExperimentConfig):
    """Returns (frames, data captures per frame, training-burst captures or None)."""
    with _stage("tx"):
        frames = [build_frame(cfg, k) for k in range(cfg.frames)]
    with _stage("channel"):
        caps = [transmit(fr, cfg, ("data", k)) for k, fr in enumerate(frames)]
        train = None
        if cfg.estimator.enabled:
            burst = draw_frame(build_source(cfg), training_layout(cfg), 0, cfg.rolloff)
            train = transmit(burst, cfg, ("training",))
    return frames, caps, train


def estimator_config(cfg: ExperimentConfig):
    e = cfg.estimator
    return EstimatorConfig(stages=tuple(e.stages), max_evaluations=e.max_evaluations, rolloff=cfg.rolloff)


def stage_estimate(cfg: ExperimentConfig, train_caps):
    """Jones pre-fit, staged static fit, Jones refresh. Returns (state, diagnostics)."""
    with _stage("estimate"):
        training = draw_frame(build_source(cfg), training_layout(cfg), 0, cfg.rolloff).training
        ecfg = estimator_config(cfg)
        cs = nominal_state(cfg)
        diag = {}
        if cfg.estimator.fit_jones:
            r0 = estimate_jones(training, train_caps, cs, ecfg)
            cs = r0.state
            diag["jones_prefit_objective"] = r0.objective
        r = estimate_static(training, train_caps, ecfg, cs)
        cs = r.state
        diag.update(static_objective=r.objective, static_evaluations=r.evaluations, static_converged=r.converged)
        if not r.converged:
            log.warning("static estimation stopped before convergence (objective %.3e)", r.objective)
        if cfg.estimator.fit_jones:
            r2 = estimate_jones(training, train_caps, cs, ecfg)
            cs = r2.state
            diag["jones_objective"] = r2.objective
        return cs, diag


def stage_reconstruct(cfg: ExperimentConfig, caps, cs: ChannelState, frame: Frame):
    """FFE then GS; returns (FieldEstimate, GsTrace)."""
    with _stage("ffe"):
        rx = cs.rx_responses(caps[0].frontend.n_branches)
        if not all(r.is_identity() for r in rx):
            caps = [ffe_calibrate_and_equalize(c, rx, cfg.gs.ffe_taps, 1.0 / cfg.sps, cfg.gs.ffe_max_gain_db) for c in caps]
    with _stage("reconstruct"):
        return gs_reconstruct(caps, cs, gs_config(cfg), frame)


def stage_score(cfg: ExperimentConfig, payload_symbols, frame: Frame) -> ScoreReport:
    with _stage("metrics"):
        return score_payload(payload_symbols, frame, cfg.symbol_rate_gbaud, cfg.rolloff, cfg.metrics.fec_overhead)


# -- run / sweep ---------------------------------------------------------------------------


@dataclass
class FrameResult:
    frame: Frame
    captures: list
    symbols: np.ndarray
    trace: GsTrace
    report: ScoreReport


@dataclass
class RunResult:
    config: ExperimentConfig
    state: ChannelState
    true_state: ChannelState
    frames: list = field(default_factory=list)
    training_captures: list | None = None
    estimation: dict = field(default_factory=dict)

    @property
    def reports(self):
        return [f.report for f in self.frames]

    def mean(self, name):
        if name == "recovery_snr_db":
            return float(np.mean([np.mean(r.recovery_snr_db) for r in self.reports]))
        return float(np.mean([getattr(r, name) for r in self.reports]))


def run(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    frames, caps, train = stage_capture(cfg)
    truth = true_state(cfg)
    cs, diag = (truth, {}) if train is None else stage_estimate(cfg, train)
    res = RunResult(cfg, cs, truth, training_captures=train, estimation=diag)
    for fr, c in zip(frames, caps):
        est, trace = stage_reconstruct(cfg, c, cs, fr)
        res.frames.append(FrameResult(fr, c, est.symbols, trace, stage_score(cfg, est.symbols, fr)))
    return res


SWEEP_AXES = {
    "distance": "channel.length_km",
    "entropy": "tx.entropy_bits",
    "iterations": "gs.iterations",
    "osnr": "channel.osnr_db",
}
SWEEP_HEADER = ("axis_value", "metric", "value", "seed")
_SWEEP_METRICS = ("recovery_snr_db", "gmi", "ngmi", "net_rate_gbps", "net_ose_bps_per_hz")


def _cast(axis, v):
    return int(v) if axis == "iterations" else float(v)


def _sweep_point(args):
    cfg, axis, value = args
    seed = derive_seed(cfg.seed, axis, value)
    c = cfg.with_value(SWEEP_AXES[axis], _cast(axis, value)).replace(seed=seed).validate()
    r = run(c)
    rows = [(value, m, f"{r.mean(m):.10g}", seed) for m in _SWEEP_METRICS]
    rows.append((value, "final_objective", f"{np.mean([f.trace.objective[-1] for f in r.frames]):.10g}", seed))
    return rows


def sweep(cfg: ExperimentConfig, axis, values, threads=1):
    """Long-format rows (axis_value, metric, value, seed), one run per value."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = [_cast(axis, v) for v in values]
    d = np.diff(values)
    if values and not (np.all(d > 0) or np.all(d < 0)):
        raise ConfigError("sweep values must be strictly monotone")
    jobs = [(cfg, axis, v) for v in values]
    if threads and threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs), os.cpu_count() or 1)) as ex:
            chunks = list(ex.map(_sweep_point, jobs))
    else:
        chunks = [_sweep_point(j) for j in jobs]
    return [row for ch in chunks for row in ch]


def config_record(cfg):
    d = config_to_dict(cfg)
    d["provenance"] = provenance(cfg)
    return d
