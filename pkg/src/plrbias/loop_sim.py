"""Open- and closed-loop data generation."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .lti_core import (
    Polynomial,
    RationalFilter,
    as_filter,
    as_polynomial,
    characteristic_polynomial,
    filter_apply,
)

CSV_SCHEMA = "plrbias.datarecord/1"


class UnstableLoopError(ValueError):
    """Closed-loop characteristic polynomial has roots on or outside the unit circle."""

    def __init__(self, root_moduli):
        self.root_moduli = np.sort(np.asarray(root_moduli))[::-1]
        super().__init__(
            "closed loop is not internally stable; root moduli of A S + B R: "
            + ", ".join(f"{m:.6g}" for m in self.root_moduli)
        )


@dataclass(frozen=True)
class ControllerRS:
    """Control law ``S u(t) = -R y(t)`` plus the additive input excitation."""

    R: Polynomial
    S: Polynomial

    def __post_init__(self):
        object.__setattr__(self, "R", as_polynomial(self.R))
        object.__setattr__(self, "S", as_polynomial(self.S))
        if not self.S.is_monic:
            raise ValueError("controller polynomial S must be monic")

    @property
    def K(self) -> RationalFilter:
        return RationalFilter(self.R, self.S)


@dataclass(frozen=True, eq=False)
class DataRecord:
    """Sampled identification data.

    ``truth_noise`` is the additive output disturbance (v, or W e for equation
    error data); ``innovation`` is the white source e when one was used.
    """

    u: np.ndarray
    y: np.ndarray
    r_u: Optional[np.ndarray] = None
    truth_noise: Optional[np.ndarray] = None
    innovation: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = None
        for name in ("u", "y", "r_u", "truth_noise", "innovation"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
            if n is None:
                n = v.size
            elif v.size != n:
                raise ValueError(f"{name} has {v.size} samples, expected {n}")

    @property
    def sample_count(self) -> int:
        return self.y.size

    @property
    def closed_loop(self) -> bool:
        return self.r_u is not None

    def columns(self) -> list:
        cols = ["t"]
        if self.r_u is not None:
            cols.append("r_u")
        cols += ["u", "y"]
        for extra in ("truth_noise", "innovation"):
            if getattr(self, extra) is not None:
                cols.append(extra)
        return cols

    def to_csv(self, path=None, config_hash: str = "") -> str:
        """Serialize as CSV (``%.17g`` floats, LF endings) behind a provenance comment."""
        buf = io.StringIO()
        buf.write(f"# schema={CSV_SCHEMA} config_hash={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(cols)
        data = [getattr(self, c) for c in cols[1:]]
        for t in range(self.sample_count):
            w.writerow([t] + ["%.17g" % col[t] for col in data])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    @classmethod
    def from_csv(cls, path) -> "DataRecord":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader)
        required = {"t", "u", "y"}
        if not required <= set(header):
            raise ValueError(f"CSV missing columns {sorted(required - set(header))}")
        known = {"t", "r_u", "u", "y", "truth_noise", "innovation"}
        unknown = set(header) - known
        if unknown:
            raise ValueError(f"unknown CSV columns {sorted(unknown)}")
        rows = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
        if rows.size == 0:
            rows = np.zeros((0, len(header)))
        cols = {name: rows[:, i] for i, name in enumerate(header)}
        return cls(
            u=cols["u"], y=cols["y"], r_u=cols.get("r_u"),
            truth_noise=cols.get("truth_noise"), innovation=cols.get("innovation"),
        )


def split_plant(G) -> tuple:
    """``(B, A)`` of a causal plant, normalized so that ``A[0] = 1``."""
    G = as_filter(G)
    if not G.is_causal:
        raise ValueError("plant must be causal")
    den0 = G.den.coeffs[0]
    return G.num * (1.0 / den0), G.den * (1.0 / den0)


def simulate_open_loop(G, noise_model, u, e) -> DataRecord:
    """``y = G u + W e``; the disturbance ``W e`` is kept as ``truth_noise``."""
    G = as_filter(G)
    W = as_filter(noise_model)
    u = np.asarray(u, dtype=float)
    e = np.asarray(e, dtype=float)
    if u.shape != e.shape:
        raise ValueError("u and e must have the same length")
    if np.any(e != 0) and not W.is_stable():
        warnings.warn("unstable noise model driven by nonzero noise: disturbance diverges", RuntimeWarning)
    v = filter_apply(W, e)
    y = filter_apply(G, u) + v
    return DataRecord(u=u, y=y, truth_noise=v, innovation=e)


def check_loop_stability(G, K: ControllerRS) -> Polynomial:
    B, A = split_plant(G)
    P = characteristic_polynomial(A, B, K.R, K.S)
    if P.coeffs[0] == 0.0:
        raise ValueError("ill-posed loop: A S + B R has zero constant coefficient")
    if not P.is_stable():
        raise UnstableLoopError(np.abs(P.roots()))
    return P


def simulate_closed_loop(G, K: ControllerRS, r_u, v=None, *, noise_model=None, innovation=None) -> DataRecord:
    """Simulate ``y = G u + v`` under ``S u = S r_u - R y`` sample by sample.

    The disturbance is either ``v`` directly or ``noise_model`` driven by the
    white ``innovation`` (then ``v = W e`` and e is retained as well).
    """
    B, A = split_plant(G)
    check_loop_stability(G, K)
    r = np.asarray(r_u, dtype=float)
    n = r.size
    if innovation is not None:
        if v is not None:
            raise ValueError("give either v or (noise_model, innovation), not both")
        e = np.asarray(innovation, dtype=float)
        W = as_filter(noise_model if noise_model is not None else 1.0)
        v = filter_apply(W, e)
    else:
        e = None
        v = np.zeros(n) if v is None else np.asarray(v, dtype=float)
    if v.size != n:
        raise ValueError("r_u and v must have the same length")

    a, b = A.coeffs, B.coeffs
    rc, sc = K.R.coeffs, K.S.coeffs
    if b[0] != 0.0 and rc[0] != 0.0:
        raise ValueError("algebraic loop: plant and controller both have direct feedthrough")
    x = np.zeros(n)  # noise-free plant output
    y = np.zeros(n)
    u = np.zeros(n)
    na, nb, nr, ns = len(a), len(b), len(rc), len(sc)
    for t in range(n):
        acc = 0.0
        for k in range(1, min(na, t + 1)):
            acc -= a[k] * x[t - k]
        for k in range(1, min(nb, t + 1)):
            acc += b[k] * u[t - k]
        if b[0] == 0.0:
            x[t] = acc
            y[t] = x[t] + v[t]
            # S (u - r) = -R y
            w = 0.0
            for k in range(1, min(ns, t + 1)):
                w -= sc[k] * (u[t - k] - r[t - k])
            for k in range(min(nr, t + 1)):
                w -= rc[k] * y[t - k]
            u[t] = r[t] + w
        else:
            w = 0.0
            for k in range(1, min(ns, t + 1)):
                w -= sc[k] * (u[t - k] - r[t - k])
            for k in range(1, min(nr, t + 1)):
                w -= rc[k] * y[t - k]
            u[t] = r[t] + w
            x[t] = acc + b[0] * u[t]
            y[t] = x[t] + v[t]
    return DataRecord(u=u, y=y, r_u=r, truth_noise=v, innovation=e)


def closed_loop_transfer(G, K: ControllerRS) -> tuple:
    """Closed-form maps ``r_u -> y``, ``v -> y``, ``r_u -> u``, ``v -> u``."""
    B, A = split_plant(G)
    P = characteristic_polynomial(A, B, K.R, K.S)
    return (
        RationalFilter(B * K.S, P),
        RationalFilter(A * K.S, P),
        RationalFilter(A * K.S, P),
        RationalFilter(-(A * K.R), P),
    )


def loop_identity_residual(data: DataRecord, K: ControllerRS) -> float:
    """Max over t of ``|S u + R y - S r_u|``."""
    lhs = filter_apply(K.S, data.u) + filter_apply(K.R, data.y)
    return float(np.max(np.abs(lhs - filter_apply(K.S, data.r_u)))) if data.sample_count else 0.0
