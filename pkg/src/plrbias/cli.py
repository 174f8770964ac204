"""Command-line front end: ``plrbias <subcommand> [--config FILE] [--out DIR] [--seed N]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import jsonschema
import numpy as np

from .bias import Method, bias_integral, bias_weight
from .experiment import (
    DivergenceError,
    ExperimentConfig,
    StageError,
    identify,
    provenance,
    reproduce,
    result_json,
    simulate,
    write_json,
    write_table,
)
from .loop_sim import DataRecord, UnstableLoopError
from .metrics import nu_gap
from .models import EstimationResult
from .signals import Spectrum

EXIT_USAGE = 2
EXIT_UNSTABLE = 3
EXIT_DIVERGED = 4
EXIT_FAILED = 5


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig.from_dict(seed=args.seed)
    return ExperimentConfig.from_file(args.config, seed=args.seed)


def _out_dir(args, cfg: ExperimentConfig) -> str:
    out = args.out or cfg.raw["output_dir"]
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _config(args)
    data = simulate(cfg)
    out = _out_dir(args, cfg)
    data.to_csv(os.path.join(out, "data.csv"), config_hash=cfg.hash)
    write_json(os.path.join(out, "provenance.json"), provenance(cfg, samples=data.sample_count))
    print(f"wrote {data.sample_count} samples to {out}/data.csv")
    return 0


def cmd_identify(args) -> int:
    cfg = _config(args)
    data = DataRecord.from_csv(args.data)
    results = identify(cfg, data, args.algorithm)
    out = _out_dir(args, cfg)
    for name, res in results.items():
        path = os.path.join(out, f"result_{name.lower()}.json")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(result_json(res, cfg, data))
        verdict = res.stationarity.get("stationary")
        print(f"{name}: theta={np.array2string(res.theta, precision=6)} loss={res.loss:.6g}"
              + (f" stationary={verdict}" if verdict is not None else ""))
    return 0


def _load_results(paths) -> list:
    return [EstimationResult.from_json(p) for p in paths]


def cmd_bias(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    G = cfg.plant()
    grid = cfg.grid()
    spec = Spectrum.flat(grid, float(cfg.raw["excitation"]["amplitude"]) ** 2)
    report = {"config_hash": cfg.hash, "results": []}
    cols = {"omega_normalized": grid.normalized}
    for res in _load_results(args.result):
        st = res.structure
        w = bias_weight(st, res.theta, Method(res.method), grid, plant=G)
        cols[f"weight_{res.method.lower()}"] = w.deterministic_weight
        entry = {"method": res.method, "theta": res.theta.tolist(), "labels": w.labels, "integrals": {}}
        for m in (Method.PLR, Method.PEM):
            wm = bias_weight(st, res.theta, m, grid, plant=G)
            entry["integrals"][m.value] = bias_integral(wm, G, st.model(res.theta), spec)
        report["results"].append(entry)
    write_table(os.path.join(out, "bias_weights.csv"), cols, cfg.hash)
    write_json(os.path.join(out, "bias.json"), report)
    print(json.dumps(report["results"], indent=2))
    return 0


def cmd_nugap(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    G = cfg.plant()
    grid = cfg.grid()
    cols = {"omega_normalized": grid.normalized}
    report = {"config_hash": cfg.hash, "nu_gap": {}}
    for res in _load_results(args.result):
        curve = nu_gap(G, res.structure.model(res.theta), grid)
        name = res.method.lower()
        cols[f"chordal_{name}"] = curve.chordal
        report["nu_gap"][name] = {"value": curve.nu_gap, "winding_ok": curve.winding_ok}
    write_table(os.path.join(out, "gap.csv"), cols, cfg.hash)
    write_json(os.path.join(out, "nugap.json"), report)
    print(json.dumps(report["nu_gap"], indent=2))
    return 0


def cmd_reproduce(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    s = reproduce(cfg, out)
    dt = time.perf_counter() - t0
    b = s["bands"]
    print(f"PLR theta: {np.array2string(np.array(s['theta']['PLR']), precision=5)}")
    print(f"PEM theta: {np.array2string(np.array(s['theta']['PEM']), precision=5)}")
    print(f"PEM better on {b['pem_better']}, PLR better on {b['plr_better']}")
    print(f"|S/P_hat| peak at f = {s['filter_peak']['frequency']:.4f}")
    print(f"outputs in {out} ({dt:.1f} s)", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plrbias", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults to the reference experiment")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--seed", type=int, help="override the config seed (noise and multistart)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a data record")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("identify", parents=[common], help="run PLR and/or PEM on a data record")
    s.add_argument("--data", required=True, help="data record CSV written by 'simulate'")
    s.add_argument("--algorithm", choices=["plr", "pem", "both"], help="override the config algorithm")
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("bias", parents=[common], help="bias weightings and integrals of estimation results")
    s.add_argument("--result", nargs="+", required=True, help="result JSON file(s) from 'identify'")
    s.set_defaults(func=cmd_bias)

    s = sub.add_parser("nugap", parents=[common], help="chordal distance and nu-gap to the true plant")
    s.add_argument("--result", nargs="+", required=True, help="result JSON file(s) from 'identify'")
    s.set_defaults(func=cmd_nugap)

    s = sub.add_parser("reproduce-paper", parents=[common], help="run the reference PLR vs PEM comparison")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr in ("data", "config"):
        path = getattr(args, attr, None)
        if path is not None and not os.path.isfile(path):
            parser.error(f"--{attr}: no such file: {path}")
    for path in getattr(args, "result", None) or []:
        if not os.path.isfile(path):
            parser.error(f"--result: no such file: {path}")
    try:
        return args.func(args)
    except UnstableLoopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageError as exc:
        if isinstance(exc.cause, UnstableLoopError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_UNSTABLE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except jsonschema.ValidationError as exc:
        where = "/".join(str(k) for k in exc.absolute_path) or "<root>"
        print(f"error: invalid config at {where}: {exc.message}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
