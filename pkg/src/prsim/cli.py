"""Command-line experiment runner.

Exit codes: 0 success, 2 configuration or input error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .io import SchemaError, read_array, read_captures, read_state, write_array, write_captures, write_csv, write_json, write_state
from .metrics import SCORE_FIELDS, MetricsError
from .pipeline import (
    SWEEP_AXES,
    SWEEP_HEADER,
    StageError,
    build_frame,
    config_record,
    provenance,
    run,
    stage_capture,
    stage_estimate,
    stage_reconstruct,
    stage_score,
    sweep,
    true_state,
)

log = logging.getLogger("prsim")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _comments(cfg):
    p = provenance(cfg)
    return [f"config_hash={p['config_hash']}", f"tool_version={p['tool_version']}"]


def _path(d, name, k=None):
    return os.path.join(d, name if k is None else name.format(k=k))


# -- artifact writers -------------------------------------------------------------------


def _write_config(out, cfg):
    write_json(_path(out, "config.json"), config_record(cfg))


def _write_capture_artifacts(out, cfg, frames, caps, train):
    prov = provenance(cfg)
    _write_config(out, cfg)
    for k, (fr, c) in enumerate(zip(frames, caps)):
        write_json(_path(out, "frame_{k:03d}.json", k), {"frame_index": k, "seed": fr.seed, "scale": list(fr.scale), "provenance": prov})
        write_captures(_path(out, "captures_{k:03d}.bin", k), c, {"provenance": prov, "frame_index": k})
    if train is not None:
        write_captures(_path(out, "training_captures.bin"), train, {"provenance": prov})
    write_state(_path(out, "channel_true.json"), true_state(cfg), prov)


def _write_reconstruction(out, cfg, k, symbols, trace):
    prov = provenance(cfg)
    write_array(_path(out, "symbols_{k:03d}.bin", k), symbols, {"kind": "payload-symbols", "frame_index": k, "provenance": prov})
    rows = [(i, f"{o:.12e}", f"{s:.6f}") for i, o, s in trace.rows()]
    write_csv(_path(out, "trace_{k:03d}.csv", k), ("iteration", "objective", "recovery_snr_db"), rows, _comments(cfg))


def _write_report(out, cfg, reports):
    write_csv(_path(out, "report.csv"), SCORE_FIELDS, [r.row() for r in reports], _comments(cfg))


# -- subcommands ------------------------------------------------------------------------------


def cmd_run(cfg, args):
    res = run(cfg)
    out = args.out
    _write_capture_artifacts(out, cfg, [f.frame for f in res.frames], [f.captures for f in res.frames], res.training_captures)
    if res.training_captures is not None:
        write_state(_path(out, "channel_state.json"), res.state, provenance(cfg))
    for k, f in enumerate(res.frames):
        _write_reconstruction(out, cfg, k, f.symbols, f.trace)
    _write_report(out, cfg, res.reports)
    for r in res.reports:
        print(f"frame {r.frame_seed}: NGMI {r.ngmi:.4f}  GMI {r.gmi:.4f}  SNR {np.mean(r.recovery_snr_db):.2f} dB")
    return EXIT_OK


def _parse_values(text):
    if text is None or not text.strip():
        return []
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(cfg, args):
    try:
        values = _parse_values(args.values)
    except ValueError:
        raise ConfigError("--values must be a comma-separated list of numbers") from None
    rows = sweep(cfg, args.axis, values, threads=args.threads)
    _write_config(args.out, cfg)
    write_csv(_path(args.out, f"sweep_{args.axis}.csv"), SWEEP_HEADER, rows, _comments(cfg))
    return EXIT_OK


def cmd_capture(cfg, args):
    frames, caps, train = stage_capture(cfg)
    _write_capture_artifacts(args.out, cfg, frames, caps, train)
    return EXIT_OK


def _check_provenance(meta, cfg, path):
    prov = meta.get("provenance", {})
    if prov.get("config_hash") != provenance(cfg)["config_hash"]:
        raise SchemaError(f"{path} was produced by a different configuration")


def cmd_estimate(cfg, args):
    src = args.inp or args.out
    p = _path(src, "training_captures.bin")
    caps, meta = read_captures(p)
    _check_provenance(meta, cfg, p)
    cs, diag = stage_estimate(cfg, caps)
    write_state(_path(args.out, "channel_state.json"), cs, {**provenance(cfg), **{k: float(v) for k, v in diag.items()}})
    return EXIT_OK


def _load_state(src):
    p = _path(src, "channel_state.json")
    if not os.path.exists(p):
        p = _path(src, "channel_true.json")
    return read_state(p)


def cmd_reconstruct(cfg, args):
    src = args.inp or args.out
    cs = _load_state(src)
    for k in range(cfg.frames):
        p = _path(src, "captures_{k:03d}.bin", k)
        caps, meta = read_captures(p)
        _check_provenance(meta, cfg, p)
        est, trace = stage_reconstruct(cfg, caps, cs, build_frame(cfg, k))
        _write_reconstruction(args.out, cfg, k, est.symbols, trace)
    return EXIT_OK


def cmd_score(cfg, args):
    src = args.inp or args.out
    reports = []
    for k in range(cfg.frames):
        p = _path(src, "symbols_{k:03d}.bin", k)
        sym, meta = read_array(p)
        _check_provenance(meta, cfg, p)
        reports.append(stage_score(cfg, sym, build_frame(cfg, k)))
    _write_report(args.out, cfg, reports)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "capture": cmd_capture,
    "estimate": cmd_estimate,
    "reconstruct": cmd_reconstruct,
    "score": cmd_score,
}


def build_parser():
    p = argparse.ArgumentParser(prog="prsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"prsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--seed", type=int, help="base seed (unsigned 64-bit), overrides the config")
        s.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("estimate", "reconstruct", "score"):
            s.add_argument("--in", dest="inp", help="directory with earlier stage artifacts (default: --out)")
        if name == "sweep":
            s.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
            s.add_argument("--values", default="", help="comma-separated, strictly monotone")
    return p


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.replace(seed=args.seed).validate()
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, SchemaError) as e:
        print(f"prsim: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"prsim: missing input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"prsim: {e}", file=sys.stderr)
        return EXIT_STAGE
    except MetricsError as e:
        print(f"prsim: stage 'metrics' failed: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
