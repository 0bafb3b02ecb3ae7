"""Linear fiber channel: chromatic dispersion, Jones rotation, ASE noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import ComplexWaveform, DualPolField, fft_freqs

__all__ = [
    "SPEED_OF_LIGHT",
    "OSNR_REF_BANDWIDTH",
    "FiberSpec",
    "JonesMatrix",
    "NoiseSpec",
    "cd_transfer",
    "apply_cd",
    "apply_cd_dp",
    "apply_jones",
    "add_ase",
    "estimate_osnr_db",
    "osnr_to_snr_db",
    "phase_noise",
]

SPEED_OF_LIGHT = 299_792_458.0
OSNR_REF_BANDWIDTH = 12.5e9  # 0.1 nm at 1550 nm


@dataclass(frozen=True)
class FiberSpec:
    length_km: float = 100.0
    dispersion_ps_per_nm_km: float = 17.0
    wavelength_nm: float = 1550.0

    def __post_init__(self):
        if self.length_km < 0:
            raise ValueError("fiber length must be >= 0")

    @property
    def total_dispersion_ps_per_nm(self):
        return self.length_km * self.dispersion_ps_per_nm_km


def cd_transfer(f, total_dispersion_ps_per_nm, wavelength_nm=1550.0):
    """All-pass dispersion response exp(+j*pi*lambda^2*D*f^2/c).

    Group delay is -lambda^2*D*f/c, so for positive D (standard SMF,
    anomalous dispersion) higher frequencies arrive earlier.
    apply_cd(-D) undoes apply_cd(D).
    """
    lam = wavelength_nm * 1e-9
    d = total_dispersion_ps_per_nm * 1e-3  # ps/nm -> s/m
    return np.exp(1j * np.pi * lam**2 * d * np.asarray(f) ** 2 / SPEED_OF_LIGHT)


def apply_cd(field: ComplexWaveform, total_dispersion_ps_per_nm, wavelength_nm=1550.0):
    if abs(total_dispersion_ps_per_nm) > 1e5:
        raise ValueError("|total dispersion| must not exceed 1e5 ps/nm")
    if total_dispersion_ps_per_nm == 0:
        return field.with_samples(field.samples.copy())
    H = cd_transfer(fft_freqs(len(field), field.sample_rate), total_dispersion_ps_per_nm, wavelength_nm)
    return field.with_samples(np.fft.ifft(np.fft.fft(field.samples) * H))


def apply_cd_dp(dp: DualPolField, total_dispersion_ps_per_nm, wavelength_nm=1550.0):
    if total_dispersion_ps_per_nm == 0:
        return dp.with_samples(dp.samples.copy())
    H = cd_transfer(fft_freqs(len(dp), dp.sample_rate), total_dispersion_ps_per_nm, wavelength_nm)
    return dp.with_samples(np.fft.ifft(np.fft.fft(dp.samples, axis=1) * H, axis=1))


@dataclass(frozen=True, eq=False)
class JonesMatrix:
    """Unitary, frequency-flat polarization transform.

    ``from_angles`` builds [[cos a e^{j p1}, -sin a e^{-j p2}],
    [sin a e^{j p2}, cos a e^{-j p1}]].
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.shape != (2, 2):
            raise ValueError("Jones matrix must be 2x2")
        if np.linalg.norm(m.conj().T @ m - np.eye(2)) > 1e-10:
            raise ValueError("Jones matrix must be unitary")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(2))

    @classmethod
    def from_angles(cls, alpha, phi1=0.0, phi2=0.0):
        ca, sa = np.cos(alpha), np.sin(alpha)
        return cls(
            np.array(
                [
                    [ca * np.exp(1j * phi1), -sa * np.exp(-1j * phi2)],
                    [sa * np.exp(1j * phi2), ca * np.exp(-1j * phi1)],
                ]
            )
        )

    @classmethod
    def random(cls, rng):
        a = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        q, r = np.linalg.qr(a)
        return cls(q * (np.diag(r) / np.abs(np.diag(r))))

    def angles(self):
        """(alpha, phi1, phi2) for matrices of the ``from_angles`` family (det = 1)."""
        m = self.matrix
        alpha = float(np.arctan2(np.abs(m[1, 0]), np.abs(m[0, 0])))
        phi1 = float(np.angle(m[0, 0])) if abs(m[0, 0]) > 1e-12 else 0.0
        phi2 = float(np.angle(m[1, 0])) if abs(m[1, 0]) > 1e-12 else 0.0
        return alpha, phi1, phi2

    @property
    def H(self):
        return JonesMatrix(self.matrix.conj().T)


def apply_jones(dp: DualPolField, J: JonesMatrix):
    if not isinstance(J, JonesMatrix):
        J = JonesMatrix(J)
    return dp.with_samples(J.matrix @ dp.samples)


@dataclass(frozen=True)
class NoiseSpec:
    """ASE loading; ``osnr_db=inf`` disables noise."""

    osnr_db: float = float("inf")
    seed: int = 0

    def __post_init__(self):
        if np.isnan(self.osnr_db) or self.osnr_db == -np.inf:
            raise ValueError("osnr_db must be finite or +inf")


def osnr_to_snr_db(osnr_db, symbol_rate, ref_bandwidth=OSNR_REF_BANDWIDTH):
    """Per-polarization in-band SNR for a dual-pol signal.

    OSNR counts total signal power over ASE in both polarizations within
    the reference bandwidth, so SNR = OSNR * B_ref / R_s.
    """
    return osnr_db + 10 * np.log10(ref_bandwidth / symbol_rate)


def _noise_density(dp: DualPolField, osnr_db, ref_bandwidth):
    p_sig = np.mean(np.sum(np.abs(dp.samples) ** 2, axis=0))
    # total (both pol) ASE PSD in W/Hz for the requested OSNR
    return p_sig / (10 ** (osnr_db / 10) * ref_bandwidth)


def add_ase(dp: DualPolField, n: NoiseSpec, symbol_rate=None, ref_bandwidth=OSNR_REF_BANDWIDTH):
    """Add white circular Gaussian ASE at the requested OSNR.

    The noise PSD is flat over the simulation bandwidth and split equally
    between polarizations. ``symbol_rate`` is accepted for API symmetry;
    the OSNR definition does not depend on it.
    """
    if np.isinf(n.osnr_db):
        return dp.with_samples(dp.samples.copy())
    n0 = _noise_density(dp, n.osnr_db, ref_bandwidth)
    var_per_pol = n0 / 2 * dp.sample_rate  # per-sample variance over the full band
    rng = np.random.default_rng(n.seed)
    w = rng.normal(size=(2, 2, len(dp)))
    noise = (w[:, 0] + 1j * w[:, 1]) * np.sqrt(var_per_pol / 2)
    return dp.with_samples(dp.samples + noise)


def estimate_osnr_db(clean: DualPolField, noisy: DualPolField, ref_bandwidth=OSNR_REF_BANDWIDTH):
    """OSNR from a noiseless reference and its noisy copy over the whole frame."""
    d = noisy.samples - clean.samples
    n0 = np.mean(np.sum(np.abs(d) ** 2, axis=0)) / noisy.sample_rate
    p_sig = np.mean(np.sum(np.abs(clean.samples) ** 2, axis=0))
    return float(10 * np.log10(p_sig / (n0 * ref_bandwidth)))


def phase_noise(n, sample_rate, linewidth_hz, rng):
    """Wiener laser phase-noise trajectory (radians)."""
    if linewidth_hz <= 0:
        return np.zeros(n)
    step = rng.normal(scale=np.sqrt(2 * np.pi * linewidth_hz / sample_rate), size=n)
    return np.cumsum(step)
