"""Artifact files: a one-line JSON header followed by raw little-endian data.

Arrays keep their exact float64/complex128 bits, so a stage reading a
saved artifact sees exactly what the in-process pipeline saw.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile

import numpy as np

from .chanest import ChannelState
from .channel import JonesMatrix
from .frontend import BranchSpec, FrontendSpec, IntensityCapture, Transform
from .signal import FrequencyResponse
from .txsim import TxImpairments

__all__ = [
    "SchemaError",
    "ARRAY_FORMAT",
    "write_array",
    "read_array",
    "response_to_dict",
    "response_from_dict",
    "state_to_dict",
    "state_from_dict",
    "write_state",
    "read_state",
    "frontend_to_dict",
    "frontend_from_dict",
    "write_captures",
    "read_captures",
    "write_json",
    "read_json",
    "write_csv",
]

ARRAY_FORMAT = "prsim-array"
ARRAY_VERSION = 1
_DTYPES = {"float64": "<f8", "complex128": "<c16"}


class SchemaError(ValueError):
    """Malformed or incompatible artifact file."""


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_array(path, arr, meta=None):
    a = np.asarray(arr)
    kind = "complex128" if np.iscomplexobj(a) else "float64"
    a = np.ascontiguousarray(a, dtype=_DTYPES[kind])
    head = {"format": ARRAY_FORMAT, "version": ARRAY_VERSION, "dtype": kind, "shape": list(a.shape), "meta": meta or {}}
    _atomic_write(path, json.dumps(head, sort_keys=True).encode() + b"\n" + a.tobytes())


def read_array(path):
    """Returns (array, meta)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        body = fh.read()
    try:
        head = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise SchemaError(f"{path}: header is not JSON") from None
    if not isinstance(head, dict) or head.get("format") != ARRAY_FORMAT:
        raise SchemaError(f"{path}: not a {ARRAY_FORMAT} file")
    if head.get("version") != ARRAY_VERSION:
        raise SchemaError(f"{path}: unsupported version {head.get('version')!r}")
    kind, shape = head.get("dtype"), head.get("shape")
    if kind not in _DTYPES or not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise SchemaError(f"{path}: bad dtype or shape")
    dt = np.dtype(_DTYPES[kind])
    if len(body) != int(np.prod(shape)) * dt.itemsize:
        raise SchemaError(f"{path}: payload size does not match header")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(kind), head.get("meta", {})


def write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: {e}") from None


def write_csv(path, header, rows, comments=()):
    """Tidy CSV with optional leading '#' comment lines."""
    import io as _io

    buf = _io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _atomic_write(path, buf.getvalue().encode())


# -- structured objects --------------------------------------------------------------


def response_to_dict(r: FrequencyResponse | None):
    if r is None:
        return None
    if r.is_taps:
        t = np.asarray(r.taps)
        return {"kind": r.kind, "taps_re": t.real.tolist(), "taps_im": t.imag.tolist(), "tap_spacing_symbols": r.tap_spacing}
    v = np.asarray(r.values)
    return {"kind": r.kind, "freqs_hz": np.asarray(r.freqs).tolist(), "values_re": v.real.tolist(), "values_im": v.imag.tolist()}


def response_from_dict(d):
    if d is None:
        return None
    try:
        if "taps_re" in d:
            taps = np.array(d["taps_re"]) + 1j * np.array(d["taps_im"])
            if d["kind"] == "real":
                taps = taps.real
            return FrequencyResponse.from_taps(taps, tap_spacing=d["tap_spacing_symbols"], kind=d["kind"])
        vals = np.array(d["values_re"]) + 1j * np.array(d["values_im"])
        return FrequencyResponse.from_spectrum(np.array(d["freqs_hz"]), vals, kind=d["kind"])
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"bad frequency response: {e}") from None


def state_to_dict(cs: ChannelState):
    m = cs.jones.matrix
    return {
        "format": "prsim-channel-state",
        "version": 1,
        "tx": {
            "eo_response": response_to_dict(cs.tx.eo_response),
            "iq_gain_imbalance_db": cs.tx.iq_gain_imbalance_db,
            "iq_phase_error_deg": cs.tx.iq_phase_error_deg,
            "iq_skew_symbols": cs.tx.iq_skew,
            "mzm_drive_ratio": cs.tx.mzm_drive_ratio,
        },
        "total_dispersion_ps_per_nm": cs.total_dispersion_ps_per_nm,
        "wavelength_nm": cs.wavelength_nm,
        "jones_re": m.real.tolist(),
        "jones_im": m.imag.tolist(),
        "rx": None if cs.rx is None else [response_to_dict(r) for r in cs.rx],
        "delays_symbols": None if cs.delays is None else list(cs.delays),
    }


def state_from_dict(d):
    if not isinstance(d, dict) or d.get("format") != "prsim-channel-state":
        raise SchemaError("not a channel-state document")
    try:
        t = d["tx"]
        tx = TxImpairments(
            eo_response=response_from_dict(t["eo_response"]) or FrequencyResponse.identity("complex"),
            iq_gain_imbalance_db=t["iq_gain_imbalance_db"],
            iq_phase_error_deg=t["iq_phase_error_deg"],
            iq_skew=t["iq_skew_symbols"],
            mzm_drive_ratio=t["mzm_drive_ratio"],
        )
        J = JonesMatrix(np.array(d["jones_re"]) + 1j * np.array(d["jones_im"]))
        rx = None if d["rx"] is None else tuple(response_from_dict(r) for r in d["rx"])
        return ChannelState(tx, d["total_dispersion_ps_per_nm"], d["wavelength_nm"], J, rx, d["delays_symbols"])
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"bad channel state: {e}") from None


def write_state(path, cs, extra=None):
    d = state_to_dict(cs)
    if extra:
        d["provenance"] = extra
    write_json(path, d)


def read_state(path):
    return state_from_dict(read_json(path))


def frontend_to_dict(spec: FrontendSpec):
    return {
        "sample_rate_hz": spec.sample_rate,
        "symbol_rate_hz": spec.symbol_rate,
        "wavelength_nm": spec.wavelength_nm,
        "branches": [
            {
                "label": b.label,
                "transforms": [
                    {"kind": t.kind, "delay_symbols": t.delay_symbols, "dispersion_ps_per_nm": t.dispersion_ps_per_nm} for t in b.transforms
                ],
                "combine_with": b.combine_with,
                "coupler_ratio": b.coupler_ratio,
                "oe_response": response_to_dict(b.oe_response),
                "thermal_noise_std": b.thermal_noise_std,
                "adc_bits": b.adc_bits,
                "adc_full_scale": b.adc_full_scale,
            }
            for b in spec.branches
        ],
    }


def frontend_from_dict(d):
    try:
        branches = [
            BranchSpec(
                b["label"],
                tuple(Transform(**t) for t in b["transforms"]),
                b["combine_with"],
                b["coupler_ratio"],
                response_from_dict(b["oe_response"]),
                b["thermal_noise_std"],
                b["adc_bits"],
                b["adc_full_scale"],
            )
            for b in d["branches"]
        ]
        return FrontendSpec(tuple(branches), d["sample_rate_hz"], d["symbol_rate_hz"], d["wavelength_nm"])
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"bad front-end description: {e}") from None


def write_captures(path, captures, extra=None):
    c0 = captures[0]
    meta = {
        "kind": "intensity-capture",
        "frontend": frontend_to_dict(c0.frontend),
        "training_span_symbols": list(c0.training_span),
        "payload_span_symbols": list(c0.payload_span),
    }
    if extra:
        meta.update(extra)
    write_array(path, np.stack([c.intensities for c in captures]), meta)


def read_captures(path):
    arr, meta = read_array(path)
    if meta.get("kind") != "intensity-capture" or arr.ndim != 3 or np.iscomplexobj(arr):
        raise SchemaError(f"{path}: not an intensity capture")
    spec = frontend_from_dict(meta.get("frontend", {}))
    try:
        ts, ps = tuple(meta["training_span_symbols"]), tuple(meta["payload_span_symbols"])
        return [IntensityCapture(arr[p], spec, ts, ps, p) for p in range(arr.shape[0])], meta
    except (KeyError, ValueError) as e:
        raise SchemaError(f"{path}: {e}") from None
