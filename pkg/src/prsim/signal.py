"""Sampled-signal containers and the DSP primitives shared by every stage.

Waveforms are finite frames. Spectral operators that model the optical link
(dispersion, delays, ideal pulse shaping) treat the frame as one period of a
periodic transmission, which keeps them exactly unitary. Finite tap filters
default to zero-padded linear convolution and flag the samples touched by
the frame edges as invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import signal as sp_signal

__all__ = [
    "ComplexWaveform",
    "RealWaveform",
    "DualPolField",
    "FrequencyResponse",
    "next_pow2",
    "fft_freqs",
    "rrc_spectrum",
    "rrc_taps",
    "rrc_shape",
    "matched_filter",
    "apply_response",
    "fractional_delay",
    "bandlimit",
    "resample",
    "parseval_energy",
]


def next_pow2(n):
    """Smallest power of two >= n."""
    n = int(n)
    if n < 1:
        raise ValueError("length must be positive")
    return 1 << (n - 1).bit_length()


def fft_freqs(n, sample_rate):
    """FFT bin frequencies in Hz (numpy ordering)."""
    return np.fft.fftfreq(n, d=1.0 / sample_rate)


def _valid_and(a, b):
    if a is None:
        return None if b is None else b.copy()
    if b is None:
        return a.copy()
    return a & b


@dataclass(frozen=True, eq=False)
class ComplexWaveform:
    """Uniformly sampled complex baseband field of one polarization.

    ``valid`` is an optional boolean mask marking samples unaffected by
    linear-filter edge effects; ``None`` means every sample is valid.
    """

    samples: np.ndarray
    sample_rate: float
    symbol_rate: float | None = None
    valid: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.complex128)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if self.symbol_rate is not None and not self.symbol_rate > 0:
            raise ValueError("symbol_rate must be positive")
        object.__setattr__(self, "samples", s)
        if self.valid is not None:
            v = np.asarray(self.valid, dtype=bool)
            if v.shape != s.shape:
                raise ValueError("valid mask must match samples")
            object.__setattr__(self, "valid", v)

    def __len__(self):
        return self.samples.size

    @property
    def sps(self):
        if self.symbol_rate is None:
            raise ValueError("waveform carries no symbol rate")
        return self.sample_rate / self.symbol_rate

    def energy(self):
        """Sum of |s|^2 over samples."""
        return float(np.sum(np.abs(self.samples) ** 2))

    def integrated_energy(self):
        """Energy integrated over time (sum |s|^2 / sample_rate); rate-invariant."""
        return self.energy() / self.sample_rate

    def mean_power(self):
        return self.energy() / self.samples.size

    def with_samples(self, samples, valid=None):
        return replace(self, samples=samples, valid=_valid_and(self.valid, valid))


@dataclass(frozen=True, eq=False)
class RealWaveform:
    """Uniformly sampled real waveform, e.g. a photodetected intensity."""

    samples: np.ndarray
    sample_rate: float
    symbol_rate: float | None = None
    valid: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples)
        if np.iscomplexobj(s):
            raise TypeError("RealWaveform samples must be real")
        s = s.astype(np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)
        if self.valid is not None:
            v = np.asarray(self.valid, dtype=bool)
            if v.shape != s.shape:
                raise ValueError("valid mask must match samples")
            object.__setattr__(self, "valid", v)

    def __len__(self):
        return self.samples.size

    @property
    def sps(self):
        if self.symbol_rate is None:
            raise ValueError("waveform carries no symbol rate")
        return self.sample_rate / self.symbol_rate

    def energy(self):
        return float(np.sum(self.samples**2))

    def integrated_energy(self):
        return self.energy() / self.sample_rate

    def with_samples(self, samples, valid=None):
        return replace(self, samples=samples, valid=_valid_and(self.valid, valid))


@dataclass(frozen=True, eq=False)
class DualPolField:
    """Two polarization tributaries on a shared time base; ``samples`` is (2, N)."""

    samples: np.ndarray
    sample_rate: float
    symbol_rate: float | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.complex128)
        if s.ndim != 2 or s.shape[0] != 2 or s.shape[1] == 0:
            raise ValueError("dual-pol samples must have shape (2, N), N > 0")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_pols(cls, x: ComplexWaveform, y: ComplexWaveform):
        if len(x) != len(y) or x.sample_rate != y.sample_rate:
            raise ValueError("polarizations must share length and sample rate")
        return cls(np.vstack([x.samples, y.samples]), x.sample_rate, x.symbol_rate)

    def pol(self, i):
        return ComplexWaveform(self.samples[i], self.sample_rate, self.symbol_rate)

    def __len__(self):
        return self.samples.shape[1]

    @property
    def sps(self):
        return self.sample_rate / self.symbol_rate

    def energy(self):
        return float(np.sum(np.abs(self.samples) ** 2))

    def with_samples(self, samples):
        return replace(self, samples=samples)


@dataclass(frozen=True, eq=False)
class FrequencyResponse:
    """Linear filter given either as taps or as a dense spectrum.

    Taps are spaced ``tap_spacing`` symbol periods apart with the centre tap
    as time reference, so the tap count must be odd. A dense spectrum is
    given on ``freqs`` (multiples of the symbol rate) and linearly
    interpolated; real-kind spectra are specified for f >= 0 only and
    extended by conjugate symmetry.
    """

    kind: str = "complex"
    taps: np.ndarray | None = None
    tap_spacing: float | None = None
    freqs: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("real", "complex"):
            raise ValueError("kind must be 'real' or 'complex'")
        if (self.taps is None) == (self.values is None):
            raise ValueError("give exactly one of taps or a dense spectrum")
        if self.taps is not None:
            dtype = np.float64 if self.kind == "real" else np.complex128
            if self.kind == "real" and np.iscomplexobj(self.taps):
                if np.any(np.imag(self.taps) != 0):
                    raise ValueError("real-kind taps must be real")
            t = np.atleast_1d(np.asarray(np.real(self.taps) if self.kind == "real" else self.taps, dtype=dtype))
            if t.ndim != 1 or t.size % 2 == 0:
                raise ValueError("tap count must be odd (centred reference tap)")
            if self.tap_spacing is None or not self.tap_spacing > 0:
                raise ValueError("tap_spacing (symbol periods) must be positive")
            object.__setattr__(self, "taps", t)
        else:
            f = np.asarray(self.freqs, dtype=np.float64)
            v = np.asarray(self.values, dtype=np.complex128)
            if f.shape != v.shape or f.ndim != 1 or f.size < 2:
                raise ValueError("freqs and values must be matching 1-D arrays")
            if np.any(np.diff(f) <= 0):
                raise ValueError("freqs must be strictly increasing")
            if self.kind == "real":
                if f[0] != 0 or np.any(f < 0):
                    raise ValueError("real-kind spectra are given on f >= 0 starting at DC")
                if v[0].imag != 0:
                    raise ValueError("real-kind spectrum must be real at DC")
            object.__setattr__(self, "freqs", f)
            object.__setattr__(self, "values", v)

    @classmethod
    def identity(cls, kind="complex"):
        return cls(kind=kind, taps=np.array([1.0]), tap_spacing=0.5)

    @classmethod
    def from_taps(cls, taps, tap_spacing=0.5, kind=None):
        taps = np.asarray(taps)
        if kind is None:
            kind = "complex" if np.iscomplexobj(taps) else "real"
        return cls(kind=kind, taps=taps, tap_spacing=tap_spacing)

    @classmethod
    def from_spectrum(cls, freqs, values, kind="complex"):
        return cls(kind=kind, freqs=freqs, values=values)

    @property
    def is_taps(self):
        return self.taps is not None

    def is_identity(self):
        return self.is_taps and self.taps.size == 1 and self.taps[0] == 1

    def span_symbols(self):
        """Impulse-response support in symbol periods (0 for dense spectra)."""
        if not self.is_taps:
            return 0.0
        return (self.taps.size - 1) * self.tap_spacing

    def evaluate(self, f, symbol_rate):
        """Complex response at frequencies ``f`` (Hz)."""
        f = np.asarray(f, dtype=np.float64)
        if self.is_taps:
            tau = self.tap_spacing / symbol_rate
            k = np.arange(self.taps.size) - (self.taps.size - 1) / 2
            return np.exp(-2j * np.pi * np.multiply.outer(f, k * tau)) @ self.taps.astype(np.complex128)
        fn = f / symbol_rate
        if self.kind == "real":
            a = np.abs(fn)
            h = np.interp(a, self.freqs, self.values.real) + 1j * np.interp(a, self.freqs, self.values.imag)
            return np.where(fn < 0, np.conj(h), h)
        return np.interp(fn, self.freqs, self.values.real) + 1j * np.interp(fn, self.freqs, self.values.imag)


# -- pulse shaping -----------------------------------------------------------


def rrc_spectrum(f, symbol_rate, rolloff):
    """Root-raised-cosine amplitude spectrum, peak 1."""
    a = np.abs(np.asarray(f, dtype=np.float64)) / symbol_rate
    f1 = (1 - rolloff) / 2
    f2 = (1 + rolloff) / 2
    h = np.zeros_like(a)
    h[a <= f1] = 1.0
    m = (a > f1) & (a <= f2)
    if rolloff > 0:
        h[m] = np.sqrt(0.5 * (1 + np.cos(np.pi / rolloff * (a[m] - f1))))
    return h


def rrc_taps(sps, rolloff, span):
    """Unit-energy RRC impulse response, ``span*sps + 1`` taps (Proakis form)."""
    n = int(round(span * sps))
    t = (np.arange(n + 1) - n / 2) / sps
    h = np.empty_like(t)
    b = rolloff
    for i, ti in enumerate(t):
        if ti == 0:
            h[i] = 1 + b * (4 / np.pi - 1)
        elif b > 0 and abs(abs(4 * b * ti) - 1) < 1e-9:
            h[i] = b / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            h[i] = (np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))) / (
                np.pi * ti * (1 - (4 * b * ti) ** 2)
            )
    return h / np.linalg.norm(h)


def _check_shaping_args(sps, rolloff, span):
    if int(sps) != sps or sps < 2:
        raise ValueError("sps must be an integer >= 2 (bandwidth constraint needs oversampling)")
    if not 0 < rolloff <= 1:
        raise ValueError("rolloff must lie in (0, 1]")
    if span is not None and span < 16:
        raise ValueError("span must be at least 16 symbols")


def rrc_shape(symbols, sps=2, rolloff=0.01, span=None, symbol_rate=1.0):
    """Pulse-shape ``symbols`` with a unit-energy RRC filter.

    With ``span=None`` the filter is applied exactly in the frequency domain
    over the whole (periodic) frame, so the output is strictly band-limited
    to ``(1 + rolloff) * symbol_rate / 2``. With an integer span, truncated
    taps are circularly convolved; the pulse is centred on each symbol.

    Returns a ComplexWaveform of ``len(symbols) * sps`` samples.
    """
    _check_shaping_args(sps, rolloff, span)
    sps = int(sps)
    s = np.asarray(symbols, dtype=np.complex128).ravel()
    n = s.size * sps
    up = np.zeros(n, dtype=np.complex128)
    up[::sps] = s
    fs = symbol_rate * sps
    if span is None:
        h = rrc_spectrum(fft_freqs(n, fs), symbol_rate, rolloff) * np.sqrt(sps)
        y = np.fft.ifft(np.fft.fft(up) * h)
    else:
        taps = rrc_taps(sps, rolloff, span)
        y = _circular_fir(up, taps)
    return ComplexWaveform(y, fs, symbol_rate)


def matched_filter(w: ComplexWaveform, rolloff, span=None):
    """Matched RRC filter sampled at the symbol centres.

    Inverse of :func:`rrc_shape` up to ISI: ``matched_filter(rrc_shape(s))``
    returns ``s`` (exactly for ``span=None``).
    """
    sps = int(round(w.sps))
    n = len(w)
    if span is None:
        h = rrc_spectrum(fft_freqs(n, w.sample_rate), w.symbol_rate, rolloff) * np.sqrt(sps)
        y = np.fft.ifft(np.fft.fft(w.samples) * h)
    else:
        taps = rrc_taps(sps, rolloff, span)
        y = _circular_fir(w.samples, taps[::-1].conj())
    return y[::sps]


def _circular_fir(x, taps):
    n = x.size
    c = (taps.size - 1) // 2
    h = np.zeros(n, dtype=np.complex128)
    idx = (np.arange(taps.size) - c) % n
    np.add.at(h, idx, taps)
    return np.fft.ifft(np.fft.fft(x) * np.fft.fft(h))


# -- filtering -----------------------------------------------------------------


def apply_response(w, h: FrequencyResponse, mode="linear"):
    """Filter a waveform with a frequency response.

    ``mode="linear"`` zero-pads to the next power of two >= len + span and
    performs linear convolution aligned on the reference tap; samples
    within half the impulse span of either frame edge are marked invalid
    in the returned waveform's ``valid`` mask. ``mode="circular"`` filters
    on the frame's own FFT grid (periodic frame) and touches no mask.

    Real-kind responses are only defined on real (detected) waveforms.
    """
    if h.kind == "real" and isinstance(w, ComplexWaveform):
        raise TypeError("real responses act on detected (real) waveforms only")
    if mode not in ("linear", "circular"):
        raise ValueError("mode must be 'linear' or 'circular'")
    if h.is_identity():
        return w.with_samples(w.samples.copy())
    if w.symbol_rate is None:
        raise ValueError("waveform needs a symbol rate to place the response")
    x = w.samples
    n = x.size
    if mode == "circular":
        H = h.evaluate(fft_freqs(n, w.sample_rate), w.symbol_rate)
        y = np.fft.ifft(np.fft.fft(x) * H)
        valid = None
    else:
        half = int(np.ceil(h.span_symbols() * w.sps / 2)) if h.is_taps else n
        nfft = next_pow2(n + 2 * half)
        H = h.evaluate(fft_freqs(nfft, w.sample_rate), w.symbol_rate)
        y = np.fft.ifft(np.fft.fft(x, nfft) * H)[:n]
        valid = np.ones(n, dtype=bool)
        e = min(half, n)
        if e:
            valid[:e] = False
            valid[n - e :] = False
    if isinstance(w, RealWaveform):
        y = y.real
    return w.with_samples(y, valid)


def fractional_delay(x, delay_samples):
    """Band-limited circular delay of a 1-D (or (..., N)) array by a real number of samples."""
    x = np.asarray(x)
    n = x.shape[-1]
    if float(delay_samples).is_integer():
        return np.roll(x, int(delay_samples), axis=-1)
    k = np.fft.fftfreq(n)
    ph = np.exp(-2j * np.pi * k * delay_samples)
    if n % 2 == 0:
        # Nyquist bin carries a real cosine; keep the delayed signal real-preserving
        ph[n // 2] = np.cos(np.pi * delay_samples)
    y = np.fft.ifft(np.fft.fft(x, axis=-1) * ph, axis=-1)
    return y.real if np.isrealobj(x) else y


def bandlimit(x, sample_rate, limit_hz):
    """Zero all spectral content above ``limit_hz`` (circular; idempotent)."""
    x = np.asarray(x)
    n = x.shape[-1]
    X = np.fft.fft(x, axis=-1)
    X[..., np.abs(fft_freqs(n, sample_rate)) > limit_hz] = 0
    return np.fft.ifft(X, axis=-1)


def parseval_energy(samples):
    """Energy computed in the frequency domain."""
    s = np.asarray(samples)
    return float(np.sum(np.abs(np.fft.fft(s, axis=-1)) ** 2) / s.shape[-1])


# -- resampling ------------------------------------------------------------------


def resample(w, new_rate, max_denominator=1000, tol=1e-9):
    """Band-limited (FFT) resampling of a periodic frame via scipy.

    The rate ratio must be rational within ``tol`` (relative) using
    denominators up to ``max_denominator``, and the output length must be
    an integer number of samples. Amplitudes of in-band components are
    preserved, so the time-integrated energy is preserved.
    """
    if not new_rate > 0:
        raise ValueError("new_rate must be positive")
    ratio = new_rate / w.sample_rate
    frac = Fraction(ratio).limit_denominator(max_denominator)
    if abs(float(frac) - ratio) > tol * ratio:
        raise ValueError(f"rate ratio {ratio!r} is not rational within tolerance")
    n = len(w)
    if (n * frac.numerator) % frac.denominator:
        raise ValueError("resampled length would not be an integer number of samples")
    m = n * frac.numerator // frac.denominator
    y = sp_signal.resample(w.samples, m)
    return type(w)(y, new_rate, w.symbol_rate)
