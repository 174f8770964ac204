"""Model structures, parameter mapping, predictors and estimation results.

Parameter vectors are plain ``numpy`` arrays ordered ``[a_1..a_nA, b_1..b_nB,
c_1..c_nC]``. The input polynomial carries the delay ``d >= 1`` in front:
``B(q^-1) = q^-d (b_1 + b_2 q^-1 + ...)``, so with ``d = 1`` the regressor
holds ``u(t), u(t-1), ...`` when predicting ``y(t+1)``.

For the closed-loop ARMAX predictor the third block holds the coefficients
``h_i`` of the predictor's error polynomial ``H``; the noise polynomial it
implies is the rational filter ``C = H - 1 + P/S``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .loop_sim import ControllerRS, DataRecord
from .lti_core import Polynomial, RationalFilter, filter_apply


class Kind(str, enum.Enum):
    OL_ARX = "OL_ARX"
    OL_ARMAX = "OL_ARMAX"
    OL_OE = "OL_OE"
    CL_ARMAX = "CL_ARMAX"
    CL_OE = "CL_OE"

    @property
    def closed_loop(self) -> bool:
        return self in (Kind.CL_ARMAX, Kind.CL_OE)

    @property
    def has_noise_part(self) -> bool:
        return self in (Kind.OL_ARMAX, Kind.CL_ARMAX)

    @property
    def output_error(self) -> bool:
        """Regressor built from predicted rather than measured outputs."""
        return self in (Kind.OL_OE, Kind.CL_ARMAX, Kind.CL_OE)


@dataclass(frozen=True)
class ModelStructure:
    kind: Kind
    n_a: int
    n_b: int
    n_c: int = 0
    delay: int = 1
    controller: Optional[ControllerRS] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if min(self.n_a, self.n_b, self.n_c) < 0:
            raise ValueError("orders must be non-negative")
        if self.delay < 1:
            raise ValueError("delay must be >= 1")
        if self.kind.has_noise_part and self.n_c < 1:
            raise ValueError(f"{self.kind.value} needs n_c >= 1")
        if not self.kind.has_noise_part and self.n_c != 0:
            raise ValueError(f"{self.kind.value} has no noise polynomial; n_c must be 0")
        if self.kind.closed_loop and self.controller is None:
            raise ValueError(f"closed-loop structure {self.kind.value} requires a controller")

    @property
    def n_params(self) -> int:
        return self.n_a + self.n_b + self.n_c

    @property
    def transient(self) -> int:
        return max(self.n_a, self.n_b + self.delay, self.n_c)

    def polynomials(self, theta) -> tuple:
        """``(A, B, C)`` for ``theta``; C is H for CL_ARMAX, 1 when absent."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"theta must have {self.n_params} entries, got {theta.shape}")
        a = theta[: self.n_a]
        b = theta[self.n_a : self.n_a + self.n_b]
        c = theta[self.n_a + self.n_b :]
        A = Polynomial(np.r_[1.0, a])
        B = Polynomial(np.r_[np.zeros(self.delay), b]) if self.n_b else Polynomial([0.0])
        C = Polynomial(np.r_[1.0, c])
        return A, B, C

    def pack(self, A, B, C=None) -> np.ndarray:
        """Inverse of :meth:`polynomials`."""
        def take(p, start, n):
            c = np.zeros(start + n)
            src = Polynomial(p).coeffs if not isinstance(p, Polynomial) else p.coeffs
            m = min(len(src), start + n)
            c[:m] = src[:m]
            return c[start:]

        A = A if isinstance(A, Polynomial) else Polynomial(A)
        if A.coeffs[0] != 1.0:
            raise ValueError("A must be monic")
        parts = [take(A, 1, self.n_a), take(B, self.delay, self.n_b)]
        if self.n_c:
            parts.append(take(C, 1, self.n_c))
        return np.concatenate(parts)

    def char_poly(self, theta) -> Polynomial:
        """Estimated closed-loop polynomial ``P = A S + B R``."""
        A, B, _ = self.polynomials(theta)
        K = self.controller
        return A * K.S + B * K.R

    def predictor_poly(self, theta) -> Polynomial:
        """Denominator that must be stable for the fixed-parameter predictor."""
        A, B, C = self.polynomials(theta)
        k = self.kind
        if k is Kind.OL_ARX:
            return Polynomial.one()
        if k is Kind.OL_ARMAX:
            return C
        if k is Kind.OL_OE:
            return A
        P = self.char_poly(theta)
        if k is Kind.CL_OE:
            return P
        return (C - 1.0) * self.controller.S + P

    def model(self, theta) -> RationalFilter:
        A, B, _ = self.polynomials(theta)
        return RationalFilter(B, A)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "n_a": self.n_a, "n_b": self.n_b,
             "n_c": self.n_c, "delay": self.delay}
        if self.controller is not None:
            d["controller"] = {"R": self.controller.R.coeffs.tolist(),
                               "S": self.controller.S.coeffs.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelStructure":
        ctrl = d.get("controller")
        return cls(
            kind=Kind(d["kind"]), n_a=int(d["n_a"]), n_b=int(d["n_b"]),
            n_c=int(d.get("n_c", 0)), delay=int(d.get("delay", 1)),
            controller=ControllerRS(ctrl["R"], ctrl["S"]) if ctrl else None,
        )


def regressor_at(structure: ModelStructure, t: int, y_like, u_like, eps) -> np.ndarray:
    """Regressor ``phi(t)`` used to predict ``y(t+1)``; samples before 0 are zero.

    ``y_like``/``u_like`` are the measured or model signals according to the
    structure's row of the predictor table.
    """
    n_a, n_b, n_c, d = structure.n_a, structure.n_b, structure.n_c, structure.delay
    phi = np.zeros(n_a + n_b + n_c)
    for i in range(n_a):
        k = t - i
        if k >= 0:
            phi[i] = -y_like[k]
    for i in range(n_b):
        k = t + 1 - d - i
        if k >= 0:
            phi[n_a + i] = u_like[k]
    for i in range(n_c):
        k = t - i
        if k >= 0:
            phi[n_a + n_b + i] = eps[k]
    return phi


def model_input_at(controller: ControllerRS, t: int, r_u, yhat, uhat) -> float:
    """``u_hat(t)`` from ``S u_hat = S r_u - R y_hat``."""
    s, rc = controller.S.coeffs, controller.R.coeffs
    w = 0.0
    for k in range(1, min(len(s), t + 1)):
        w -= s[k] * (uhat[t - k] - r_u[t - k])
    for k in range(min(len(rc), t + 1)):
        w -= rc[k] * yhat[t - k]
    return r_u[t] + w


def regressors_from_errors(structure: ModelStructure, data: DataRecord, eps) -> np.ndarray:
    """Stack ``phi(t)`` for all t when the error sequence is imposed from outside.

    Output-error kinds use ``y_hat = y - eps``; closed-loop kinds run the model
    input through the controller. Row t is ``phi(t)``.
    """
    eps = np.asarray(eps, dtype=float)
    y, u = data.y, data.u
    n = data.sample_count
    kind = structure.kind
    if kind.closed_loop and data.r_u is None:
        raise ValueError("closed-loop structure needs r_u in the data record")
    y_like = y - eps if kind.output_error else y
    u_like = u
    if kind.closed_loop:
        u_like = np.zeros(n)
        for t in range(n):
            u_like[t] = model_input_at(structure.controller, t, data.r_u, y_like, u_like)
    return np.array([regressor_at(structure, t, y_like, u_like, eps) for t in range(n)])


def predict_recursive(structure: ModelStructure, theta, data: DataRecord) -> dict:
    """Run the fixed-parameter predictor ``y_hat(t+1) = theta' phi(t)`` sample by sample.

    Returns ``yhat``, ``uhat`` (closed loop), ``eps`` and the regressor matrix.
    """
    theta = np.asarray(theta, dtype=float)
    y = data.y
    n = data.sample_count
    kind = structure.kind
    yhat = np.zeros(n)
    uhat = np.zeros(n)
    eps = np.zeros(n)
    phis = np.zeros((n, structure.n_params))
    if n:
        eps[0] = y[0]
    for t in range(n):
        if kind.closed_loop:
            uhat[t] = model_input_at(structure.controller, t, data.r_u, yhat, uhat)
        y_like = yhat if kind.output_error else y
        u_like = uhat if kind.closed_loop else data.u
        phis[t] = regressor_at(structure, t, y_like, u_like, eps)
        if t + 1 < n:
            yhat[t + 1] = theta @ phis[t]
            eps[t + 1] = y[t + 1] - yhat[t + 1]
    return {"yhat": yhat, "uhat": uhat if kind.closed_loop else None, "eps": eps, "phi": phis}


def prediction_error(structure: ModelStructure, theta, data: DataRecord) -> np.ndarray:
    """One-step prediction error of the fixed-parameter predictor (zero initial state).

    Closed forms per structure, equivalent to :func:`predict_recursive`:

    * ARX: ``A y - B u``; ARMAX: ``(A y - B u) / C``; OE: ``y - (B/A) u``
    * CL_OE: ``y - (B S / P) r_u``
    * CL_ARMAX: ``(P y - B S r_u) / ((H - 1) S + P)``
    """
    A, B, C = structure.polynomials(theta)
    y, u = data.y, data.u
    k = structure.kind
    if k is Kind.OL_ARX:
        return filter_apply(A, y) - filter_apply(B, u)
    if k is Kind.OL_ARMAX:
        return filter_apply(RationalFilter(A, C), y) - filter_apply(RationalFilter(B, C), u)
    if k is Kind.OL_OE:
        return y - filter_apply(RationalFilter(B, A), u)
    if data.r_u is None:
        raise ValueError("closed-loop structure needs r_u in the data record")
    S = structure.controller.S
    P = structure.char_poly(theta)
    if k is Kind.CL_OE:
        return y - filter_apply(RationalFilter(B * S, P), data.r_u)
    D = structure.predictor_poly(theta)
    return filter_apply(RationalFilter(P, D), y) - filter_apply(RationalFilter(B * S, D), data.r_u)


@dataclass
class EstimationResult:
    method: str
    structure: ModelStructure
    theta: np.ndarray
    loss: float
    eps: Optional[np.ndarray] = field(default=None, repr=False)
    regressors: Optional[np.ndarray] = field(default=None, repr=False)
    trajectory: Optional[np.ndarray] = field(default=None, repr=False)
    pass_snapshots: list = field(default_factory=list)
    stationarity: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "method": self.method,
            "structure": self.structure.to_dict(),
            "orders": {"n_a": self.structure.n_a, "n_b": self.structure.n_b,
                       "n_c": self.structure.n_c, "delay": self.structure.delay},
            "theta": [float(v) for v in self.theta],
            "loss": float(self.loss),
            "stationarity": self.stationarity,
            "pass_snapshots": [[float(v) for v in s] for s in self.pass_snapshots],
            "diagnostics": self.diagnostics,
        }

    def to_json(self, path=None, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        text = json.dumps(d, indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, path) -> "EstimationResult":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(
            method=d["method"], structure=ModelStructure.from_dict(d["structure"]),
            theta=np.asarray(d["theta"], dtype=float), loss=d["loss"],
            pass_snapshots=[np.asarray(s) for s in d.get("pass_snapshots", [])],
            stationarity=d.get("stationarity", {}), diagnostics=d.get("diagnostics", {}),
        )
