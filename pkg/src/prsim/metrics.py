"""Scoring: recovery SNR, bitwise GMI, NGMI and net-rate bookkeeping."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .txsim import gray_labels

__all__ = [
    "NGMI_THRESHOLD",
    "FEC_OVERHEAD",
    "SNR_CAP_DB",
    "SCORE_SCHEMA_VERSION",
    "SCORE_FIELDS",
    "MetricsError",
    "ScoreReport",
    "recovery_snr",
    "gmi",
    "gmi_fixed_variance",
    "ngmi",
    "net_rate",
    "net_ose",
    "threshold_gmi",
    "score_payload",
]

NGMI_THRESHOLD = 0.8798  # code-specific; configured, not derived
FEC_OVERHEAD = 0.1902
SNR_CAP_DB = 80.0
SCORE_SCHEMA_VERSION = 1


class MetricsError(ValueError):
    pass


def recovery_snr(est, ref, cap_db=SNR_CAP_DB):
    """SNR of ``est`` against ``ref`` after removing a complex gain.

    SNR = 10 log10(E|s|^2 / E|g s_hat - s|^2) with g = 1/a, where
    s_hat ~ a s is the least-squares fit of the estimate onto the
    reference. Additive noise of power N on unit-power symbols then reads
    -10 log10(N). Perfect agreement is reported as ``cap_db`` and an
    estimate orthogonal to the reference as ``-cap_db``.
    """
    est = np.asarray(est, dtype=np.complex128).ravel()
    ref = np.asarray(ref, dtype=np.complex128).ravel()
    if est.size != ref.size:
        raise MetricsError("estimate and reference lengths differ")
    if est.size == 0:
        raise MetricsError("no symbols to score")
    sig = np.mean(np.abs(ref) ** 2)
    a = np.vdot(ref, est) / np.vdot(ref, ref).real if sig > 0 else 0.0
    if a == 0:
        return -float(cap_db)
    err = np.mean(np.abs(est / a - ref) ** 2)
    if err <= sig * 10 ** (-cap_db / 10):
        return float(cap_db)
    return float(max(10 * np.log10(sig / err), -cap_db))


def _bit_log_ratios(y, tx_idx, points, prior, labels, var, chunk=1 << 14):
    """Sum over bits of E[log2(sum_c P q / sum_{c: b_i(c) = b_i(x)} P q)]."""
    lp = np.log(prior)
    B = labels.astype(float)
    total = 0.0
    for a in range(0, y.size, chunk):
        yy = y[a : a + chunk]
        ll = lp[None, :] - np.abs(yy[:, None] - points[None, :]) ** 2 / var
        top = ll.max(axis=1, keepdims=True)
        E = np.exp(ll - top)
        den = E.sum(axis=1)
        ones = E @ B
        zeros = E @ (1 - B)
        bits = labels[tx_idx[a : a + chunk]].astype(bool)
        num = np.where(bits, ones, zeros)
        bad = np.any(num <= 0, axis=1)
        with np.errstate(divide="ignore"):
            r = np.log(den)[:, None] - np.log(num)
        if np.any(bad):
            # rows whose matching set underflowed: exact log-sum-exp
            lb = ll[bad]
            for i in range(labels.shape[1]):
                match = labels[None, :, i] == labels[tx_idx[a : a + chunk][bad], i][:, None]
                r[bad, i] = logsumexp(lb, axis=1) - logsumexp(np.where(match, lb, -np.inf), axis=1)
        total += np.sum(r)
    return total / np.log(2) / y.size


def gmi_fixed_variance(y, tx_idx, points, prior, var):
    """Bitwise GMI (bits/symbol) for a circular-Gaussian metric of variance ``var``."""
    prior = np.asarray(prior, dtype=float)
    order = points.size
    labels = gray_labels(order)
    nz = prior > 0
    H = -np.sum(prior[nz] * np.log2(prior[nz]))
    keep = nz
    if not np.all(keep):
        remap = -np.ones(order, dtype=int)
        remap[keep] = np.arange(np.count_nonzero(keep))
        points, labels, prior, tx_idx = points[keep], labels[keep], prior[keep], remap[tx_idx]
    return float(H - _bit_log_ratios(y, tx_idx, points, prior, labels, var))


def gmi(rx, tx_labels, source, noise_var=None):
    """Monte-Carlo bitwise GMI with a fitted Gaussian mismatched metric.

    Parameters
    ----------
    rx : array_like
        Received symbols on the scale of ``source.points``.
    tx_labels : array_like of int
        Transmitted constellation indices (negative entries are skipped).
    source : ShapedSource
        Gray-labelled constellation and priors.
    noise_var : float, optional
        Metric variance; by default chosen to maximize the GMI.
    """
    rx = np.asarray(rx, dtype=np.complex128).ravel()
    idx = np.asarray(tx_labels).ravel()
    if rx.size != idx.size:
        raise MetricsError("received symbols and labels differ in length")
    keep = idx >= 0
    rx, idx = rx[keep], idx[keep]
    if rx.size == 0:
        raise MetricsError("no symbols to score")
    if rx.size < 10_000:
        warnings.warn("fewer than 1e4 symbols: GMI estimate has high variance", stacklevel=2)
    pts, prior = source.points, source.distribution
    if noise_var is not None:
        return gmi_fixed_variance(rx, idx, pts, prior, noise_var)
    e = max(float(np.mean(np.abs(rx - pts[idx]) ** 2)), 1e-12)
    res = minimize_scalar(
        lambda t: -gmi_fixed_variance(rx, idx, pts, prior, 10**t),
        bounds=(np.log10(e) - 1, np.log10(e) + 1),
        method="bounded",
        options={"xatol": 1e-3},
    )
    return float(min(-res.fun, source.entropy()))


def ngmi(gmi_bits, entropy, bits_per_symbol):
    """NGMI = 1 - (H - GMI)/m."""
    return 1.0 - (entropy - gmi_bits) / bits_per_symbol


def net_rate(baud, n_pol, pilot_ratio, entropy, fec_overhead, bits_per_symbol):
    """Net bit rate n_pol * baud * (1 - pilot_ratio) * [H - OH/(1+OH) m], in the unit of ``baud``."""
    if not 0 <= pilot_ratio < 1:
        raise MetricsError("pilot_ratio must lie in [0, 1)")
    if fec_overhead < 0:
        raise MetricsError("FEC overhead must be >= 0")
    bracket = entropy - fec_overhead / (1 + fec_overhead) * bits_per_symbol
    if bracket <= 0:
        raise MetricsError(f"entropy {entropy} cannot carry the FEC overhead (net bracket {bracket:.4f} <= 0)")
    return n_pol * baud * (1 - pilot_ratio) * bracket


def net_ose(rate, occupied_bandwidth):
    """Net optical spectral efficiency; same frequency unit for rate and bandwidth."""
    return rate / occupied_bandwidth


def threshold_gmi(entropy, fec_overhead, bits_per_symbol):
    """GMI at which the net-rate bracket equals the FEC-overhead-limited rate."""
    return entropy - fec_overhead / (1 + fec_overhead) * bits_per_symbol


# -- reports ---------------------------------------------------------------------------

SCORE_FIELDS = (
    "schema",
    "frame_seed",
    "symbol_count",
    "snr_x_db",
    "snr_y_db",
    "gmi",
    "ngmi",
    "entropy",
    "net_rate_gbps",
    "net_ose_bps_per_hz",
    "fec_pass",
)


@dataclass
class ScoreReport:
    recovery_snr_db: tuple
    gmi: float
    ngmi: float
    entropy: float
    net_rate_gbps: float
    net_ose_bps_per_hz: float
    symbol_count: int
    frame_seed: int = 0

    @property
    def fec_pass(self):
        return self.ngmi >= NGMI_THRESHOLD

    def row(self):
        """CSV row matching :data:`SCORE_FIELDS`."""
        return [
            SCORE_SCHEMA_VERSION,
            self.frame_seed,
            self.symbol_count,
            f"{self.recovery_snr_db[0]:.6f}",
            f"{self.recovery_snr_db[1]:.6f}",
            f"{self.gmi:.6f}",
            f"{self.ngmi:.6f}",
            f"{self.entropy:.6f}",
            f"{self.net_rate_gbps:.6f}",
            f"{self.net_ose_bps_per_hz:.6f}",
            int(self.fec_pass),
        ]

    def to_dict(self):
        d = asdict(self)
        d["recovery_snr_db"] = list(self.recovery_snr_db)
        d["fec_pass"] = self.fec_pass
        return d


def score_payload(est_payload, frame, baud_gbaud, rolloff=0.01, fec_overhead=FEC_OVERHEAD, noise_var=None):
    """Score reconstructed payload symbols (2, payload_len) against a frame.

    Data symbols (pilots excluded) of each polarization are brought onto
    the constellation scale with the same complex gain as
    :func:`recovery_snr` before the GMI is pooled over both polarizations.
    """
    lay = frame.layout
    dm = frame.data_mask()
    src = frame.source
    est = np.asarray(est_payload)
    if est.shape != (2, lay.payload_len):
        raise MetricsError("payload estimate has the wrong shape")
    ys, ids, snrs = [], [], []
    for p in range(2):
        e = est[p, dm]
        idx = frame.labels[p, dm]
        ref = src.points[idx]
        snrs.append(recovery_snr(e, ref))
        rr = np.vdot(ref, ref).real
        a = np.vdot(ref, e) / rr if rr > 0 else 0.0
        ys.append(e / a if a != 0 else e)
        ids.append(idx)
    y, idx = np.concatenate(ys), np.concatenate(ids)
    g_ = gmi(y, idx, src, noise_var=noise_var)
    H = src.entropy()
    m = src.bits_per_symbol
    n = ngmi(g_, H, m)
    rate = net_rate(baud_gbaud, 2, lay.pilot_ratio, H, fec_overhead, m)
    return ScoreReport(tuple(snrs), g_, n, H, rate, net_ose(rate, (1 + rolloff) * baud_gbaud), int(y.size), frame.seed)
