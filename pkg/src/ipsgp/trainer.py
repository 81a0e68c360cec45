"""NLML minimization by Polak-Ribière conjugate gradients.

The line search follows Rasmussen's ``minimize`` routine (GPML): cubic
extrapolation until the Wolfe-Powell slope condition brackets a minimum,
then cubic or quadratic interpolation inside the bracket.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError
from .gp import LOG_FIELDS, Hyperparameters, KffParts, assemble_parts, nlml_and_grad, pair_geometry
from .systems import TrajectoryDataset

INT = 0.1     # don't reevaluate within 0.1 of the bracket edge
EXT = 3.0     # extrapolate at most 3x the current step
MAX = 20      # evaluations per line search
RATIO = 10.0  # maximum allowed slope ratio
SIG = 0.1
RHO = SIG / 2


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_evals: int
    n_iter: int
    reason: str
    trace: list = field(default_factory=list)


def minimize(
    fun: Callable[[np.ndarray], tuple],
    x0,
    max_evals: int = 400,
    gtol: float = 1e-8,
    callback: Optional[Callable[[dict], None]] = None,
) -> MinimizeResult:
    """Minimize a differentiable function with line-search nonlinear CG.

    Parameters
    ----------
    fun : callable
        Returns ``(value, gradient)`` at a point.
    x0 : array_like
        Starting point.
    max_evals : int
        Budget of function evaluations, including the initial one.
    gtol : float
        Stop when the gradient norm of the accepted point drops below this.
    callback : callable, optional
        Receives each trace record as it is produced.

    Returns
    -------
    MinimizeResult
        The best point seen; ``trace`` lists accepted iterates.
    """
    if max_evals < 1:
        raise ValueError("max_evals must be >= 1")
    X = np.array(x0, dtype=float)
    evals = 0

    def ev(x):
        nonlocal evals
        evals += 1
        try:
            f, g = fun(x)
        except NumericalError:
            return math.inf, None
        g = np.asarray(g, dtype=float)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return math.inf, None
        return float(f), g

    f0, df0 = ev(X)
    if df0 is None:
        raise NumericalError("objective evaluation failed at the initial point")
    trace = []

    def record(it, f, g):
        rec = {"iteration": it, "evals": evals, "nlml": f, "grad_norm": float(np.linalg.norm(g))}
        trace.append(rec)
        if callback is not None:
            callback(rec)

    record(0, f0, df0)
    if np.linalg.norm(df0) < gtol:
        return MinimizeResult(X, f0, df0, evals, 0, "gradient", trace)

    s = -df0
    d0 = -float(s @ s)
    x3 = 1.0 / (1.0 - d0)
    ls_failed = False
    it = 0
    reason = "budget"
    while evals < max_evals:
        it += 1
        X0, F0, dF0 = X.copy(), f0, df0.copy()
        M = min(MAX, max_evals - evals)

        # extrapolation
        while True:
            x2, f2, d2 = 0.0, f0, d0
            f3, df3 = f0, df0
            success = False
            while not success and M > 0:
                M -= 1
                f3, df3 = ev(X + x3 * s)
                if df3 is None:
                    x3 = (x2 + x3) / 2.0
                else:
                    success = True
            if not success:
                f3, df3 = f0, df0
                x3 = 0.0
            if f3 < F0:
                X0, F0, dF0 = X + x3 * s, f3, df3.copy()
            d3 = float(df3 @ s)
            if d3 > SIG * d0 or f3 > f0 + x3 * RHO * d0 or M == 0:
                break
            x1, f1, d1 = x2, f2, d2
            x2, f2, d2 = x3, f3, d3
            A = 6.0 * (f1 - f2) + 3.0 * (d2 + d1) * (x2 - x1)
            B = 3.0 * (f2 - f1) - (2.0 * d1 + d2) * (x2 - x1)
            disc = B * B - A * d1 * (x2 - x1)
            with np.errstate(all="ignore"):
                x3 = x1 - d1 * (x2 - x1) ** 2 / (B + math.sqrt(disc)) if disc >= 0 else math.nan
            if not math.isfinite(x3) or x3 < 0:
                x3 = x2 * EXT
            elif x3 > x2 * EXT:
                x3 = x2 * EXT
            elif x3 < x2 + INT * (x2 - x1):
                x3 = x2 + INT * (x2 - x1)

        # interpolation
        x4 = f4 = d4 = None
        while (abs(d3) > -SIG * d0 or f3 > f0 + x3 * RHO * d0) and M > 0:
            if d3 > 0 or f3 > f0 + x3 * RHO * d0:
                x4, f4, d4 = x3, f3, d3
            else:
                x2, f2, d2 = x3, f3, d3
            if x4 is None:
                break
            with np.errstate(all="ignore"):
                if f4 > f0:
                    x3 = x2 - (0.5 * d2 * (x4 - x2) ** 2) / (f4 - f2 - d2 * (x4 - x2))
                else:
                    A = 6.0 * (f2 - f4) / (x4 - x2) + 3.0 * (d4 + d2)
                    B = 3.0 * (f4 - f2) - (2.0 * d2 + d4) * (x4 - x2)
                    disc = B * B - A * d2 * (x4 - x2) ** 2
                    x3 = x2 + (math.sqrt(disc) - B) / A if disc >= 0 and A != 0 else math.nan
            if not math.isfinite(x3):
                x3 = (x2 + x4) / 2.0
            x3 = max(min(x3, x4 - INT * (x4 - x2)), x2 + INT * (x4 - x2))
            f3, df3 = ev(X + x3 * s)
            M -= 1
            if df3 is None:
                # failed evaluation: treat as an upper bracket and shrink
                f3, df3 = math.inf, np.zeros_like(X)
                d3 = 0.0
                x4, f4, d4 = x3, f3, d3
                continue
            if f3 < F0:
                X0, F0, dF0 = X + x3 * s, f3, df3.copy()
            d3 = float(df3 @ s)

        if abs(d3) < -SIG * d0 and f3 < f0 + x3 * RHO * d0:
            X = X + x3 * s
            f0 = f3
            s = (float(df3 @ df3) - float(df0 @ df3)) / float(df0 @ df0) * s - df3
            df0 = df3
            d3 = d0
            d0 = float(df0 @ s)
            if d0 > 0:
                s = -df0
                d0 = -float(s @ s)
            x3 = x3 * min(RATIO, d3 / (d0 - np.finfo(float).tiny))
            ls_failed = False
            record(it, f0, df0)
            if np.linalg.norm(df0) < gtol:
                reason = "gradient"
                break
        else:
            X, f0, df0 = X0, F0, dF0
            if f0 < trace[-1]["nlml"]:
                record(it, f0, df0)
            if ls_failed or evals >= max_evals:
                reason = "line_search" if ls_failed else "budget"
                break
            s = -df0
            d0 = -float(s @ s)
            x3 = 1.0 / (1.0 - d0)
            ls_failed = True
    return MinimizeResult(X, f0, df0, evals, it, reason, trace)


# ---------------------------------------------------------------------------
# NLML training


@dataclass
class TrainConfig:
    """Optimizer settings.

    ``randomize`` lists fields whose initial value is redrawn from U(0, 1)
    for every restart (``alpha`` and ``sigma`` by default), using ``seed``.
    """

    init: Hyperparameters
    max_evals: int = 400
    restarts: int = 1
    seed: int = 0
    randomize: tuple = ("alpha", "sigma")
    gtol: float = 1e-8

    def __post_init__(self):
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class TrainResult:
    hyper: Hyperparameters
    nlml: float
    trace: list
    reason: str
    n_evals: int

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.trace)


class _Packing:
    """Map between hyperparameters and the optimizer's flat vector."""

    def __init__(self, hyper: Hyperparameters):
        self.base = hyper
        self.fields = hyper.active_trainable
        self.sizes = [len(hyper.alpha) if f == "alpha" else 1 for f in self.fields]

    def pack(self, h: Hyperparameters) -> np.ndarray:
        out = []
        for f in self.fields:
            v = h.get(f)
            if f in LOG_FIELDS:
                out.append(np.log(v))
            else:
                out.extend(np.ravel(v))
        return np.asarray(out, dtype=float).ravel()

    def unpack(self, x) -> Hyperparameters:
        h = self.base
        k = 0
        for f, n in zip(self.fields, self.sizes):
            if f in LOG_FIELDS:
                h = h.set(f, math.exp(x[k]))
            elif f == "alpha":
                h = h.set(f, x[k : k + n])
            else:
                h = h.set(f, max(float(x[k]), 0.0))
            k += n
        return h

    def chain(self, x, h: Hyperparameters, grad: dict) -> np.ndarray:
        out = []
        k = 0
        for f, n in zip(self.fields, self.sizes):
            g = grad[f]
            if f in LOG_FIELDS:
                out.append(g * h.get(f))
            elif f == "mass":
                out.append(g if x[k] > 0 else min(g, 0.0))
            else:
                out.extend(np.ravel(g))
            k += n
        return np.asarray(out, dtype=float)


class _Objective:
    def __init__(self, ds, pack, backend, accel_config):
        self.ds = ds
        self.pack = pack
        self.backend = backend
        self.accel_config = accel_config
        self.geo = pair_geometry(ds)
        self._key = None
        self._parts: Optional[KffParts] = None

    def _parts_for(self, h: Hyperparameters, need_dw: bool) -> KffParts:
        key = (h.theta_E.omega, h.theta_E.nu, h.theta_E.s2 > 0,
               h.theta_A.omega, h.theta_A.nu, h.theta_A.s2 > 0, need_dw)
        if key != self._key:
            self._parts = assemble_parts(self.geo, h.theta_E, h.theta_A, with_grad=need_dw)
            self._key = key
        return self._parts

    def __call__(self, x):
        h = self.pack.unpack(x)
        need_dw = any(f in self.pack.fields for f in ("omega_E", "omega_A"))
        parts = self._parts_for(h, need_dw)
        if self.backend == "exact":
            ev = nlml_and_grad(self.ds, h, parts=parts)
            value, grad = ev.value, ev.grad
        else:
            from .accel import accelerated_nlml

            value, grad = accelerated_nlml(self.ds, h, self.accel_config, parts=parts)
        return value, self.pack.chain(x, h, grad)


def _initial(config: TrainConfig, rng: np.random.Generator) -> Hyperparameters:
    h = config.init
    active = h.active_trainable
    if "alpha" in config.randomize and "alpha" in active:
        h = h.set("alpha", rng.uniform(0.0, 1.0, size=len(h.alpha)))
    if "sigma" in config.randomize and "sigma" in active:
        h = h.set("sigma", rng.uniform(0.0, 1.0))
    if "mass" in config.randomize and "mass" in active:
        h = h.set("mass", rng.uniform(0.0, 1.0))
    return h


def minimize_nlml(
    ds: TrajectoryDataset,
    config: TrainConfig,
    backend: str = "exact",
    accel_config=None,
    callback=None,
) -> TrainResult:
    """Fit the trainable hyperparameters by minimizing the NLML.

    Amplitudes, length-scales and ``sigma`` are optimized in log space,
    ``alpha`` and ``mass`` in natural space with ``mass`` clamped at zero.
    With several restarts the best final NLML wins.
    """
    if backend not in ("exact", "accelerated"):
        raise ValueError("backend must be 'exact' or 'accelerated'")
    if backend == "accelerated" and accel_config is None:
        from .accel import AccelConfig

        accel_config = AccelConfig()
    h0 = config.init
    if "sigma" in h0.active_trainable and h0.sigma == 0 and "sigma" not in config.randomize:
        raise ValueError("a trainable sigma needs a positive initial value")
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(config.restarts)]
    best = None
    for rng in rngs:
        init = _initial(config, rng)
        pack = _Packing(init)
        if not pack.fields:
            ev = nlml_and_grad(ds, init, need_grad=False)
            res = TrainResult(init, ev.value, [{"iteration": 0, "evals": 1, "nlml": ev.value,
                                               "grad_norm": 0.0}], "nothing_to_train", 1)
        else:
            obj = _Objective(ds, pack, backend, accel_config)
            out = minimize(obj, pack.pack(init), max_evals=config.max_evals,
                           gtol=config.gtol, callback=callback)
            res = TrainResult(pack.unpack(out.x), out.fun, out.trace, out.reason, out.n_evals)
        if best is None or res.nlml < best.nlml:
            best = res
    return best
