"""Config-driven pipelines behind the command line, including the reference reproduction."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .bias import Method, bias_integral, bias_weight
from .lti_core import FrequencyGrid, Polynomial, RationalFilter, freq_response, sensitivity_syp
from .loop_sim import (
    ControllerRS,
    DataRecord,
    check_loop_stability,
    simulate_closed_loop,
    simulate_open_loop,
    split_plant,
)
from .metrics import bode, chordal_distance, nu_gap, winning_bands
from .models import EstimationResult, Kind, ModelStructure
from .pem import PemOptions, loss_gradient, pem_estimate, pem_loss
from .plr import FilterMode, RegressorFilterSpec, run_plr
from .signals import PrbsConfig, Spectrum, prbs_generate, rng

SUMMARY_SCHEMA_ID = "plrbias.summary/1"
TABLE_SCHEMA = "plrbias.table/1"

# Plant of the reference experiment. With an integrator as third pole
# (INTEGRATING_A) this controller cannot stabilize the loop, so the pole sits
# at 0.5 instead.
REFERENCE_B = [0.0, 1.0, 0.5]
REFERENCE_A = Polynomial([1.0, -1.5, 0.7]) * Polynomial([1.0, -0.5])
INTEGRATING_A = Polynomial([1.0, -1.5, 0.7]) * Polynomial([1.0, -1.0])
REFERENCE_R = [0.8659, -1.2763, 0.5204]
REFERENCE_S = Polynomial([1.0, -1.0]) * Polynomial([1.0, 0.3717])

DEFAULT_CONFIG = {
    "schema_version": 1,
    "seed": 0,
    "plant": {"B": REFERENCE_B, "A": REFERENCE_A.coeffs.tolist()},
    "controller": {"R": REFERENCE_R, "S": REFERENCE_S.coeffs.tolist()},
    "excitation": {
        "registers": 9,
        "taps": [9, 5],
        "amplitude": 1.0,
        "length": 8 * 511,
        "clock_divider": 1,
        "initial_state": 511,
    },
    "noise": {"variance": 0.0, "model": {"num": [1.0], "den": [1.0]}},
    "model": {"kind": "CL_OE", "n_a": 2, "n_b": 2, "n_c": 0, "delay": 1},
    "algorithm": "both",
    "filter": {"mode": "none"},
    "paa": {"passes": 10, "lambda1": 1.0, "lambda2": 1.0, "initial_gain": 1000.0},
    "pem": {},
    "grid_size": 512,
    "perturbation_trials": 100,
    "output_dir": "out",
}

# Frequency whose neighbourhood the PEM fit is expected to favour.
PROBE_FREQUENCY = 0.15
HIGH_BAND = (0.35, 0.5)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class DivergenceError(RuntimeError):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("plrbias").joinpath("schemas", name).read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("plant", "controller"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: Optional[dict] = None, seed: Optional[int] = None) -> "ExperimentConfig":
        """Fill defaults from the reference experiment, then validate."""
        merged = _merge(DEFAULT_CONFIG, d or {})
        if seed is not None:
            merged["seed"] = int(seed)
        jsonschema.validate(merged, load_schema("config.schema.json"))
        return cls(merged)

    @classmethod
    def from_file(cls, path, seed: Optional[int] = None) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), seed)

    @property
    def hash(self) -> str:
        """Digest of everything except the output location."""
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(canonical_json(body).encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def plant(self) -> RationalFilter:
        return RationalFilter(self.raw["plant"]["B"], self.raw["plant"]["A"])

    def controller(self) -> Optional[ControllerRS]:
        c = self.raw.get("controller")
        return None if c is None else ControllerRS(c["R"], c["S"])

    def noise_model(self) -> RationalFilter:
        m = self.raw["noise"].get("model", {"num": [1.0], "den": [1.0]})
        return RationalFilter(m["num"], m["den"])

    def prbs(self) -> PrbsConfig:
        e = self.raw["excitation"]
        taps = e.get("taps")
        return PrbsConfig(
            registers=e["registers"],
            taps=None if taps is None else tuple(taps),
            amplitude=e["amplitude"],
            length=e["length"],
            clock_divider=e.get("clock_divider", 1),
        )

    def structure(self) -> ModelStructure:
        m = self.raw["model"]
        kind = Kind(m["kind"])
        return ModelStructure(
            kind,
            m["n_a"],
            m["n_b"],
            m.get("n_c", 0),
            m.get("delay", 1),
            self.controller() if kind.closed_loop else None,
        )

    def filter_spec(self) -> RegressorFilterSpec:
        f = self.raw.get("filter", {"mode": "none"})
        mode = FilterMode(f["mode"])
        if mode is FilterMode.FIXED:
            return RegressorFilterSpec.fixed(RationalFilter(f["num"], f.get("den", [1.0])))
        return RegressorFilterSpec(mode)

    def pem_options(self) -> PemOptions:
        return PemOptions(**self.raw.get("pem", {}), seed=self.seed)

    def grid(self) -> FrequencyGrid:
        return FrequencyGrid.uniform(self.raw["grid_size"])


def provenance(cfg: ExperimentConfig, **extra) -> dict:
    out = {
        "schema_version": 1,
        "package_version": __version__,
        "config_hash": cfg.hash,
        "config": cfg.raw,
        "seeds": {
            "seed": cfg.seed,
            "prbs_initial_state": cfg.raw["excitation"].get("initial_state", 1),
        },
    }
    out.update(extra)
    return out


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_table(path, columns: dict, config_hash: str) -> None:
    """CSV with a ``#`` provenance line, a header row and shortest round-trip floats."""
    names = list(columns)
    cols = [np.asarray(columns[k], dtype=float) for k in names]
    buf = io.StringIO(newline="")
    buf.write(f"# schema={TABLE_SCHEMA} config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in zip(*cols):
        w.writerow([repr(float(x)) for x in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


# --- pipelines --------------------------------------------------------------


def simulate(cfg: ExperimentConfig) -> DataRecord:
    """Closed loop when a controller is configured and the model kind is closed-loop."""
    G = cfg.plant()
    pc = cfg.prbs()
    if pc.length < 1:
        raise ValueError("excitation length must be positive")
    r = prbs_generate(pc, seed=cfg.raw["excitation"].get("initial_state", 1))
    var = float(cfg.raw["noise"]["variance"])
    e = np.sqrt(var) * rng(cfg.seed).standard_normal(r.size) if var > 0 else np.zeros(r.size)
    closed = Kind(cfg.raw["model"]["kind"]).closed_loop
    K = cfg.controller()
    if closed:
        if K is None:
            raise ValueError("closed-loop model kind needs a controller in the config")
        return simulate_closed_loop(G, K, r, noise_model=cfg.noise_model(), innovation=e)
    return simulate_open_loop(G, cfg.noise_model(), r, e)


def identify(cfg: ExperimentConfig, data: DataRecord, algorithm: Optional[str] = None) -> dict:
    """Run PLR and/or PEM. PEM always starts from the PLR estimate."""
    algorithm = algorithm or cfg.raw["algorithm"]
    st = cfg.structure()
    paa = cfg.raw.get("paa", {})
    plr = run_plr(
        st,
        data,
        cfg.filter_spec(),
        passes=paa.get("passes", 10),
        lambda1=paa.get("lambda1", 1.0),
        lambda2=paa.get("lambda2", 1.0),
        initial_gain=paa.get("initial_gain", 1000.0),
    )
    d = plr.diagnostics
    if d["guard_trips"] > 0.5 * d["steps"]:
        raise DivergenceError(f"adaptation diverged: {d['guard_trips']} of {d['steps']} steps hit the stability guard")
    out = {}
    if algorithm in ("plr", "both"):
        out["PLR"] = plr
    if algorithm in ("pem", "both"):
        out["PEM"] = pem_estimate(st, data, plr.theta, cfg.pem_options())
    return out


def criteria(structure: ModelStructure, plant, grid: FrequencyGrid, level: float, theta) -> dict:
    """Both asymptotic criteria (PLR and PEM weighting) evaluated at ``theta``."""
    spec = Spectrum.flat(grid, level)
    G_hat = structure.model(theta)
    return {
        m.value: bias_integral(bias_weight(structure, theta, m, grid, plant=plant), plant, G_hat, spec)
        for m in (Method.PLR, Method.PEM)
    }


def perturbation_sweep(structure, plant, grid, level, theta, method: Method, trials: int, seed: int, rel: float = 0.05) -> dict:
    """Criterion of ``method`` at ``theta`` against seeded perturbations of relative norm ``rel``.

    Each perturbation is a random direction scaled to ``rel * |theta|``.
    """
    gen = rng(seed)
    spec = Spectrum.flat(grid, level)

    def crit(th):
        w = bias_weight(structure, th, method, grid, plant=plant)
        return bias_integral(w, plant, structure.model(th), spec)

    base = crit(theta)
    ratios = []
    for _ in range(trials):
        d = gen.standard_normal(theta.size)
        d *= rel * np.linalg.norm(theta) / np.linalg.norm(d)
        ratios.append(crit(theta + d) / base)
    ratios = np.array(ratios)
    return {
        "method": method.value,
        "trials": trials,
        "base": base,
        "min_ratio": float(ratios.min()) if trials else None,
        "violations": int(np.sum(ratios < 1.0)),
    }


def _bands(grid, lower, upper) -> list:
    return [[float(a), float(b)] for a, b in winning_bands(grid, lower, upper)]


def _band_containing(bands, f) -> Optional[list]:
    for b in bands:
        if b[0] <= f <= b[1]:
            return b
    return None


def reproduce(cfg: Optional[ExperimentConfig] = None, out_dir=None) -> dict:
    """Identification of the reference loop with an order-2 CLOE model by PLR and PEM.

    Writes ``bode.csv``, ``gap.csv``, ``filter_magnitude.csv``,
    ``bias_weights.csv`` and ``summary.json`` into ``out_dir`` (if given) and
    returns the summary.
    """
    cfg = cfg or ExperimentConfig.from_dict()
    st = cfg.structure()
    if st.kind is not Kind.CL_OE:
        raise ValueError("the reproduction compares closed-loop output-error models")

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc

    G = cfg.plant()
    K = st.controller
    grid = cfg.grid()
    level = float(cfg.raw["excitation"]["amplitude"]) ** 2
    stage("stability", lambda: check_loop_stability(G, K))
    data = stage("simulate", lambda: simulate(cfg))
    est = stage("identify", lambda: identify(cfg, data, "both"))
    plr, pem = est["PLR"], est["PEM"]

    def analyse():
        f = grid.normalized
        curves = {}
        mag_true, ph_true = bode(G, grid)
        tables = {"bode": {"omega_normalized": f, "mag_true": mag_true, "phase_true_deg": ph_true}}
        gaps = {}
        for name, res in (("plr", plr), ("pem", pem)):
            G_hat = st.model(res.theta)
            m, p = bode(G_hat, grid)
            tables["bode"][f"mag_{name}"] = m
            tables["bode"][f"phase_{name}_deg"] = p
            curves[name] = chordal_distance(G, G_hat, grid)
            gaps[name] = nu_gap(G, G_hat, grid)
        tables["gap"] = {"omega_normalized": f, "chordal_plr": curves["plr"], "chordal_pem": curves["pem"]}

        S = K.S
        filt = {name: np.abs(freq_response(RationalFilter(S, st.char_poly(res.theta)), grid))
                for name, res in (("pem", pem), ("plr", plr))}
        tables["filter_magnitude"] = {
            "omega_normalized": f,
            "s_over_p_hat_pem": filt["pem"],
            "s_over_p_hat_plr": filt["plr"],
        }
        B, A = split_plant(G)
        syp = np.abs(freq_response(sensitivity_syp(A, B, K.R, K.S), grid))
        w_plr = bias_weight(st, plr.theta, Method.PLR, grid, plant=G)
        w_pem = bias_weight(st, pem.theta, Method.PEM, grid, plant=G)
        tables["bias_weights"] = {
            "omega_normalized": f,
            "weight_plr": w_plr.deterministic_weight,
            "weight_pem": w_pem.deterministic_weight,
            "syp_magnitude": syp,
        }

        pem_wins = _bands(grid, curves["pem"], curves["plr"])
        plr_wins = _bands(grid, curves["plr"], curves["pem"])
        probe_band = _band_containing(pem_wins, PROBE_FREQUENCY)
        high = [b for b in plr_wins if b[1] > HIGH_BAND[0]]
        peak_f = float(f[int(np.argmax(filt["pem"]))])
        trials = int(cfg.raw.get("perturbation_trials", 100))
        at_plr = criteria(st, G, grid, level, plr.theta)
        at_pem = criteria(st, G, grid, level, pem.theta)
        grad = loss_gradient(st, plr.theta, data)
        summary = {
            "schema": SUMMARY_SCHEMA_ID,
            "package_version": __version__,
            "config_hash": cfg.hash,
            "samples": data.sample_count,
            "structure": st.to_dict(),
            "theta": {"PLR": plr.theta.tolist(), "PEM": pem.theta.tolist()},
            "pem_loss": {"PLR": pem_loss(st, plr.theta, data), "PEM": pem_loss(st, pem.theta, data)},
            "integrals": {"at_PLR": at_plr, "at_PEM": at_pem},
            "perturbation": {
                "PLR": perturbation_sweep(st, G, grid, level, plr.theta, Method.PLR, trials, cfg.seed + 1),
                "PEM": perturbation_sweep(st, G, grid, level, pem.theta, Method.PEM, trials, cfg.seed + 2),
            },
            "stationarity": plr.stationarity,
            "pem_gradient_at_plr": {"gradient": grad.tolist(), "inf_norm": float(np.max(np.abs(grad)))},
            "nu_gap": {k: {"value": v.nu_gap, "winding_ok": v.winding_ok} for k, v in gaps.items()},
            "bands": {
                "pem_better": pem_wins,
                "plr_better": plr_wins,
                "pem_band_at_probe": probe_band,
                "plr_band_high": high[-1] if high else None,
            },
            "filter_peak": {
                "frequency": peak_f,
                "inside_pem_band": bool(probe_band is not None and probe_band[0] <= peak_f <= probe_band[1]),
            },
            "plr_diagnostics": {k: plr.diagnostics[k] for k in ("guard_trips", "steps", "passes")},
        }
        return tables, summary

    tables, summary = stage("analyse", analyse)
    stage("validate", lambda: jsonschema.validate(summary, load_schema("summary.schema.json")))
    if out_dir is not None:
        def write():
            os.makedirs(out_dir, exist_ok=True)
            for name, cols in tables.items():
                write_table(os.path.join(out_dir, f"{name}.csv"), cols, cfg.hash)
            write_json(os.path.join(out_dir, "summary.json"), summary)
            write_json(os.path.join(out_dir, "provenance.json"), provenance(cfg))
        stage("write", write)
    return summary


def result_json(res: EstimationResult, cfg: ExperimentConfig, data: DataRecord) -> str:
    """Result JSON tagged with the config hash and the loss of ``res.theta`` under PEM."""
    return res.to_json(config_hash=cfg.hash, pem_loss=pem_loss(res.structure, res.theta, data))
