"""Experiment configuration: JSON with explicit units in key names."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigError",
    "TxConfig",
    "ChannelConfig",
    "FrontendConfig",
    "GsSection",
    "EstimatorSection",
    "MetricsSection",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
    "derive_seed",
    "ILLUSTRATIVE_OSNR_TABLE_DB",
]

# Illustrative OSNR-vs-distance table (km -> dB); a plausible placeholder,
# not measured values. Override with "osnr_table_db" in the channel section.
ILLUSTRATIVE_OSNR_TABLE_DB = {"0": 40.0, "20": 38.0, "40": 36.0, "60": 34.0, "80": 32.0, "100": 30.0}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TxConfig:
    qam_order: int = 16
    entropy_bits: float | None = None
    payload_symbols: int = 4096
    training_symbols: int = 0
    training_order: int = 64
    pilot_ratio: float = 0.1
    iq_gain_imbalance_db: float = 0.0
    iq_phase_error_deg: float = 0.0
    iq_skew_symbols: float = 0.0
    mzm_drive_ratio: float = 0.0
    eo_taps_re: tuple | None = None
    eo_taps_im: tuple | None = None

    def validate(self):
        if self.qam_order not in (16, 64, 256):
            raise ConfigError("tx.qam_order must be 16, 64 or 256")
        m = np.log2(self.qam_order)
        if self.entropy_bits is not None and not 2 <= self.entropy_bits <= m:
            raise ConfigError(f"tx.entropy_bits must lie in [2, {m:g}]")
        if self.payload_symbols < 1:
            raise ConfigError("tx.payload_symbols must be positive")
        if not 0 <= self.pilot_ratio < 1:
            raise ConfigError("tx.pilot_ratio must lie in [0, 1)")
        if not 0 <= self.mzm_drive_ratio < 2:
            raise ConfigError("tx.mzm_drive_ratio must lie in [0, 2)")
        if (self.eo_taps_re is None) != (self.eo_taps_im is None):
            raise ConfigError("tx.eo_taps_re and tx.eo_taps_im go together")
        if self.eo_taps_re is not None and (len(self.eo_taps_re) != len(self.eo_taps_im) or len(self.eo_taps_re) % 2 == 0):
            raise ConfigError("tx E/O taps need equal, odd lengths")

    @property
    def entropy(self):
        return float(np.log2(self.qam_order)) if self.entropy_bits is None else float(self.entropy_bits)


@dataclass(frozen=True)
class ChannelConfig:
    length_km: float = 100.0
    dispersion_ps_per_nm_km: float = 17.0
    wavelength_nm: float = 1550.0
    jones_angles_rad: tuple | None = None
    jones_seed: int | None = None
    osnr_db: float | None = None
    osnr_from_table: bool = False
    osnr_table_db: dict = field(default_factory=lambda: dict(ILLUSTRATIVE_OSNR_TABLE_DB))

    def validate(self):
        if self.length_km < 0:
            raise ConfigError("channel.length_km must be >= 0")
        if abs(self.length_km * self.dispersion_ps_per_nm_km) > 1e5:
            raise ConfigError("total dispersion exceeds 1e5 ps/nm")
        if self.jones_angles_rad is not None and len(self.jones_angles_rad) != 3:
            raise ConfigError("channel.jones_angles_rad needs (alpha, phi1, phi2)")
        if self.jones_angles_rad is not None and self.jones_seed is not None:
            raise ConfigError("give either channel.jones_angles_rad or channel.jones_seed")
        try:
            pts = sorted((float(k), float(v)) for k, v in self.osnr_table_db.items())
        except (TypeError, ValueError) as e:
            raise ConfigError(f"channel.osnr_table_db: {e}") from None
        if self.osnr_from_table and not pts:
            raise ConfigError("channel.osnr_table_db is empty")

    def osnr(self):
        """OSNR in dB (inf for a noiseless link)."""
        if self.osnr_from_table:
            pts = sorted((float(k), float(v)) for k, v in self.osnr_table_db.items())
            x, y = zip(*pts)
            return float(np.interp(self.length_km, x, y))
        return float("inf") if self.osnr_db is None else float(self.osnr_db)


@dataclass(frozen=True)
class FrontendConfig:
    dispersion_ps_per_nm: float = -1228.0
    delays_symbols: tuple = (93, 199)
    true_delays_symbols: tuple | None = None
    oe_3db_ghz: float | None = None
    thermal_noise_std: float = 0.0
    adc_bits: int | None = None

    def validate(self):
        if len(self.delays_symbols) != 2:
            raise ConfigError("frontend.delays_symbols needs two delays")
        if self.true_delays_symbols is not None and len(self.true_delays_symbols) != 2:
            raise ConfigError("frontend.true_delays_symbols needs two delays")
        if self.oe_3db_ghz is not None and self.oe_3db_ghz <= 0:
            raise ConfigError("frontend.oe_3db_ghz must be positive")
        if self.thermal_noise_std < 0:
            raise ConfigError("frontend.thermal_noise_std must be >= 0")


@dataclass(frozen=True)
class GsSection:
    iterations: int = 100
    momentum: float = 0.9
    reset_iterations: tuple = (10, 20, 30)
    reset_percentile: float = 80.0
    polarization_mode: str = "joint"
    use_training: bool = True
    early_stop_tol: float | None = 1e-6
    ffe_taps: int = 101
    ffe_max_gain_db: float = 20.0

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("gs.iterations must be >= 1")
        if self.polarization_mode not in ("joint", "per_pol"):
            raise ConfigError("gs.polarization_mode must be 'joint' or 'per_pol'")


@dataclass(frozen=True)
class EstimatorSection:
    enabled: bool = False
    training_symbols: int = 8192
    stages: tuple = ("delays", "dispersion", "tx")
    max_evaluations: int = 4000
    init_dispersion_ps_per_nm: float | None = None
    fit_jones: bool = True

    def validate(self):
        if self.enabled and self.training_symbols < 64:
            raise ConfigError("estimator.training_symbols must be >= 64")
        for s in self.stages:
            if s not in ("delays", "dispersion", "tx"):
                raise ConfigError(f"unknown estimator stage {s!r}")


@dataclass(frozen=True)
class MetricsSection:
    fec_overhead: float = 0.1902

    def validate(self):
        if self.fec_overhead < 0:
            raise ConfigError("metrics.fec_overhead must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    symbol_rate_gbaud: float = 100.0
    sps: int = 2
    rolloff: float = 0.01
    frames: int = 1
    seed: int = 1
    tx: TxConfig = field(default_factory=TxConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    gs: GsSection = field(default_factory=GsSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def validate(self):
        if self.symbol_rate_gbaud <= 0:
            raise ConfigError("symbol_rate_gbaud must be positive")
        if int(self.sps) != self.sps or self.sps < 2:
            raise ConfigError("sps must be an integer >= 2")
        if not 0 < self.rolloff <= 1:
            raise ConfigError("rolloff must lie in (0, 1]")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for sec in (self.tx, self.channel, self.frontend, self.gs, self.estimator, self.metrics):
            sec.validate()
        return self

    @property
    def symbol_rate(self):
        return self.symbol_rate_gbaud * 1e9

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def with_value(self, path, value):
        """Copy with a dotted ``path`` (e.g. 'channel.length_km') set to ``value``."""
        head, _, rest = path.partition(".")
        if not rest:
            return dataclasses.replace(self, **{head: value})
        sub = getattr(self, head)
        return dataclasses.replace(self, **{head: dataclasses.replace(sub, **{rest: value})})


_SECTIONS = {
    "tx": TxConfig,
    "channel": ChannelConfig,
    "frontend": FrontendConfig,
    "gs": GsSection,
    "estimator": EstimatorSection,
    "metrics": MetricsSection,
}


def _coerce(v):
    return tuple(_coerce(x) for x in v) if isinstance(v, list) else v


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for k, v in d.items():
        if k in _SECTIONS and cls is ExperimentConfig:
            kw[k] = _build(_SECTIONS[k], v, k)
        elif isinstance(v, dict):
            kw[k] = dict(v)
        else:
            kw[k] = _coerce(v)
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(d) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, d, "config")
    try:
        return cfg.validate()
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def config_to_dict(cfg: ExperimentConfig):
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, float) and not np.isfinite(v):
            return None
        return v

    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = {g.name: conv(getattr(v, g.name)) for g in dataclasses.fields(v)}
        else:
            out[f.name] = conv(v)
    return out


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if isinstance(d, dict):
        # a run's config.json carries its provenance alongside the settings
        d = {k: v for k, v in d.items() if k != "provenance"}
    return config_from_dict(d)


def config_hash(cfg: ExperimentConfig):
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def derive_seed(base_seed, *keys):
    """Deterministic 63-bit seed from a base seed and arbitrary keys."""
    h = hashlib.sha256(repr((int(base_seed),) + tuple(keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1
