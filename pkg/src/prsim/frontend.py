"""Space-time diversity intensity front-end (no LO, no carrier).

Each received polarization is split into B branches. A branch applies a
chain of linear transforms (delays, dispersive elements) and may interfere
its output with another branch's path on a coupler before a photodiode.
All branch transforms are LTI, so every branch is fully described by its
transfer function, which the reconstruction reuses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import cd_transfer
from .signal import ComplexWaveform, FrequencyResponse, RealWaveform, apply_response, fft_freqs

__all__ = [
    "Transform",
    "BranchSpec",
    "FrontendSpec",
    "IntensityCapture",
    "default_frontend",
    "transform_transfer",
    "branch_transfer",
    "branch_field",
    "detect",
    "capture",
]


@dataclass(frozen=True)
class Transform:
    """One element of a branch path: ``kind`` is 'none', 'delay' or 'dispersive'."""

    kind: str = "none"
    delay_symbols: float = 0.0
    dispersion_ps_per_nm: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "delay", "dispersive"):
            raise ValueError(f"unknown transform {self.kind!r}")


@dataclass(frozen=True, eq=False)
class BranchSpec:
    """One photodiode branch.

    ``combine_with`` names the index of another branch whose own path
    (transforms only, no combiner) is the reference arm of a coupler;
    ``coupler_ratio`` is the power fraction taken from the reference arm.
    """

    label: str
    transforms: tuple = ()
    combine_with: int | None = None
    coupler_ratio: float = 0.5
    oe_response: FrequencyResponse = field(default_factory=lambda: FrequencyResponse.identity("real"))
    thermal_noise_std: float = 0.0
    adc_bits: int | None = None
    adc_full_scale: float | None = None

    def __post_init__(self):
        if self.oe_response.kind != "real":
            raise ValueError("O/E responses are real-valued")
        if not 0 < self.coupler_ratio < 1:
            raise ValueError("coupler_ratio must lie in (0, 1)")
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def delay_symbols(self):
        return sum(t.delay_symbols for t in self.transforms if t.kind == "delay")


@dataclass(frozen=True, eq=False)
class FrontendSpec:
    branches: tuple
    sample_rate: float
    symbol_rate: float
    wavelength_nm: float = 1550.0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if len(self.branches) < 3:
            raise ValueError("at least 3 branches are needed for measurement diversity")
        for i, b in enumerate(self.branches):
            if b.combine_with is not None:
                if not 0 <= b.combine_with < len(self.branches) or b.combine_with == i:
                    raise ValueError(f"branch {i}: invalid combine_with index")

    @property
    def n_branches(self):
        return len(self.branches)

    @property
    def sps(self):
        return self.sample_rate / self.symbol_rate

    def split_amplitude(self):
        return 1.0 / np.sqrt(self.n_branches)

    def with_delays(self, delays):
        """Copy with the delay element of each branch path set to ``delays[b]`` (None keeps it)."""
        out = []
        for b, d in zip(self.branches, delays):
            if d is None:
                out.append(b)
                continue
            tr = tuple(Transform("delay", delay_symbols=d) if t.kind == "delay" else t for t in b.transforms)
            out.append(BranchSpec(b.label, tr, b.combine_with, b.coupler_ratio, b.oe_response, b.thermal_noise_std, b.adc_bits, b.adc_full_scale))
        return FrontendSpec(tuple(out), self.sample_rate, self.symbol_rate, self.wavelength_nm)

    def with_responses(self, responses):
        out = [
            BranchSpec(b.label, b.transforms, b.combine_with, b.coupler_ratio, r, b.thermal_noise_std, b.adc_bits, b.adc_full_scale)
            for b, r in zip(self.branches, responses)
        ]
        return FrontendSpec(tuple(out), self.sample_rate, self.symbol_rate, self.wavelength_nm)


def default_frontend(symbol_rate=100e9, sps=2, dispersion_ps_per_nm=-1228.0, delays=(93, 199), oe_response=None):
    """Direct, dispersive, and two delay-interferometric branches."""
    oe = oe_response or FrequencyResponse.identity("real")
    branches = (
        BranchSpec("direct", (), oe_response=oe),
        BranchSpec("dispersive", (Transform("dispersive", dispersion_ps_per_nm=dispersion_ps_per_nm),), oe_response=oe),
        BranchSpec(f"interf_{delays[0]}", (Transform("delay", delay_symbols=delays[0]),), combine_with=0, oe_response=oe),
        BranchSpec(f"interf_{delays[1]}", (Transform("delay", delay_symbols=delays[1]),), combine_with=0, oe_response=oe),
    )
    return FrontendSpec(branches, symbol_rate * sps, symbol_rate)


@dataclass(frozen=True, eq=False)
class IntensityCapture:
    """Detected intensities of one received polarization, shape (B, N).

    ``training_span`` and ``payload_span`` are (start, stop) symbol indices.
    """

    intensities: np.ndarray
    frontend: FrontendSpec
    training_span: tuple = (0, 0)
    payload_span: tuple = (0, 0)
    polarization: int = 0

    def __post_init__(self):
        s = np.asarray(self.intensities, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != self.frontend.n_branches:
            raise ValueError("intensities must be (n_branches, N)")
        object.__setattr__(self, "intensities", s)
        object.__setattr__(self, "training_span", tuple(int(v) for v in self.training_span))
        object.__setattr__(self, "payload_span", tuple(int(v) for v in self.payload_span))

    @property
    def n_samples(self):
        return self.intensities.shape[1]

    def branch(self, b):
        return RealWaveform(self.intensities[b], self.frontend.sample_rate, self.frontend.symbol_rate)

    def with_intensities(self, intensities):
        return IntensityCapture(intensities, self.frontend, self.training_span, self.payload_span, self.polarization)


def transform_transfer(transforms, f, symbol_rate, wavelength_nm=1550.0):
    H = np.ones_like(f, dtype=np.complex128)
    for t in transforms:
        if t.kind == "delay":
            H = H * np.exp(-2j * np.pi * f * t.delay_symbols / symbol_rate)
        elif t.kind == "dispersive":
            H = H * cd_transfer(f, t.dispersion_ps_per_nm, wavelength_nm)
    return H


def branch_transfer(spec: FrontendSpec, n):
    """(B, n) transfer functions from received field to each photodiode input field."""
    f = fft_freqs(n, spec.sample_rate)
    paths = [transform_transfer(b.transforms, f, spec.symbol_rate, spec.wavelength_nm) for b in spec.branches]
    out = np.empty((spec.n_branches, n), dtype=np.complex128)
    for i, b in enumerate(spec.branches):
        if b.combine_with is None:
            out[i] = paths[i]
        else:
            r = b.coupler_ratio
            out[i] = np.sqrt(1 - r) * paths[i] + np.sqrt(r) * paths[b.combine_with]
    return out * spec.split_amplitude()


def _apply_transforms(x, transforms, sample_rate, symbol_rate, wavelength_nm):
    if not transforms:
        return x.copy()
    n = x.size
    f = fft_freqs(n, sample_rate)
    sps = sample_rate / symbol_rate
    if all(t.kind == "delay" for t in transforms):
        d = sum(t.delay_symbols for t in transforms) * sps
        if float(d).is_integer():
            return np.roll(x, int(d))
    return np.fft.ifft(np.fft.fft(x) * transform_transfer(transforms, f, symbol_rate, wavelength_nm))


def branch_field(field: ComplexWaveform, b: BranchSpec, ref_field: ComplexWaveform | None = None, split=1.0, wavelength_nm=1550.0):
    """Optical field at a branch photodiode.

    Without a combiner this is ``split * transform(field)``; with one,
    ``split * (sqrt(1-r) transform(field) + sqrt(r) ref_field)``, i.e.
    ``(transform(field) + ref_field)/sqrt(2)`` for a 50:50 coupler.
    ``ref_field`` is the reference arm's field before splitting.
    """
    y = _apply_transforms(field.samples, b.transforms, field.sample_rate, field.symbol_rate, wavelength_nm)
    if b.combine_with is not None:
        if ref_field is None:
            raise ValueError(f"branch {b.label!r} interferes with a reference arm; ref_field is required")
        r = b.coupler_ratio
        y = np.sqrt(1 - r) * y + np.sqrt(r) * ref_field.samples
    return field.with_samples(split * y)


def detect(branch_out: ComplexWaveform, b: BranchSpec, seed=0, mode="circular"):
    """|E|^2, O/E response, thermal noise, optional ADC quantization."""
    i = RealWaveform(np.abs(branch_out.samples) ** 2, branch_out.sample_rate, branch_out.symbol_rate)
    if not b.oe_response.is_identity():
        i = apply_response(i, b.oe_response, mode=mode)
    x = i.samples
    if b.thermal_noise_std > 0:
        x = x + np.random.default_rng(seed).normal(scale=b.thermal_noise_std, size=x.size)
    if b.adc_bits:
        fs = b.adc_full_scale if b.adc_full_scale else float(np.max(np.abs(x))) or 1.0
        step = 2 * fs / 2**b.adc_bits
        x = np.clip(np.round(x / step) * step, -fs, fs - step)
    return i.with_samples(x)


def capture(dp, spec: FrontendSpec, seed=0, training_span=(0, 0), payload_span=(0, 0)):
    """Intensity captures of both received polarizations (list of two).

    Branch noise streams are derived from (seed, polarization, branch).
    """
    out = []
    split = spec.split_amplitude()
    seeds = np.random.SeedSequence(seed).spawn(2 * spec.n_branches)
    for p in range(2):
        e = dp.pol(p)
        arms = [
            e.with_samples(_apply_transforms(e.samples, b.transforms, e.sample_rate, e.symbol_rate, spec.wavelength_nm))
            for b in spec.branches
        ]
        rows = []
        for k, b in enumerate(spec.branches):
            ref = arms[b.combine_with] if b.combine_with is not None else None
            bf = branch_field(e, b, ref, split=split, wavelength_nm=spec.wavelength_nm)
            s = int(seeds[p * spec.n_branches + k].generate_state(1)[0])
            rows.append(detect(bf, b, seed=s).samples)
        out.append(IntensityCapture(np.vstack(rows), spec, training_span, payload_span, p))
    return out
