"""Gaussian-process likelihood and posterior for interaction kernels.

Observations are the residuals ``y = m Z + c V - F_alpha(Y)``, modeled as
``f_phi(Y) + noise`` where ``phi_E`` and ``phi_A`` carry independent Matérn
priors. Rows of every matrix follow the (trajectory, snapshot) outer, agent
middle, dimension inner ordering of the dataset.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .covfunc import MaternParams, matern_lag, matern_lag_with_domega, unit_matern_lag
from . import _fused
from .errors import IllConditionedError, NonFiniteError
from .systems import ForceFamily, TrajectoryDataset

FIELDS = ("s2_E", "omega_E", "s2_A", "omega_A", "sigma", "alpha", "mass")
LOG_FIELDS = ("s2_E", "omega_E", "s2_A", "omega_A", "sigma")
JITTER0 = 1e-6
JITTER_MAX = 1e-2
LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Hyperparameters:
    """Everything the likelihood depends on besides the data.

    ``trainable`` names the fields the trainer may update; the remaining
    fields are held fixed. ``force`` fixes the structural form of ``F`` and
    the damping term, ``alpha`` its parameters.
    """

    theta_E: MaternParams = MaternParams()
    theta_A: MaternParams = MaternParams()
    sigma: float = 0.0
    alpha: tuple = ()
    mass: float = 1.0
    force: ForceFamily = ForceFamily()
    trainable: tuple = FIELDS

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.mass < 0:
            raise ValueError("mass must be nonnegative")
        object.__setattr__(self, "alpha", tuple(float(a) for a in np.ravel(self.alpha)))
        if len(self.alpha) != self.force.n_params:
            raise ValueError("alpha does not match the force family")
        unknown = set(self.trainable) - set(FIELDS)
        if unknown:
            raise ValueError(f"unknown trainable fields {sorted(unknown)}")
        object.__setattr__(self, "trainable", tuple(f for f in FIELDS if f in self.trainable))

    def replace(self, **kw) -> "Hyperparameters":
        return replace(self, **kw)

    def get(self, name):
        if name == "s2_E":
            return self.theta_E.s2
        if name == "omega_E":
            return self.theta_E.omega
        if name == "s2_A":
            return self.theta_A.s2
        if name == "omega_A":
            return self.theta_A.omega
        if name == "alpha":
            return np.asarray(self.alpha, dtype=float)
        return getattr(self, name)

    def set(self, name, value) -> "Hyperparameters":
        if name == "s2_E":
            return self.replace(theta_E=self.theta_E.replace(s2=float(value)))
        if name == "omega_E":
            return self.replace(theta_E=self.theta_E.replace(omega=float(value)))
        if name == "s2_A":
            return self.replace(theta_A=self.theta_A.replace(s2=float(value)))
        if name == "omega_A":
            return self.replace(theta_A=self.theta_A.replace(omega=float(value)))
        if name == "alpha":
            return self.replace(alpha=tuple(np.ravel(value)))
        return self.replace(**{name: float(value)})

    @property
    def active_trainable(self) -> tuple:
        """Trainable fields that actually influence the likelihood."""
        out = []
        for f in self.trainable:
            if f in ("s2_E", "omega_E") and self.theta_E.s2 == 0:
                continue
            if f in ("s2_A", "omega_A") and self.theta_A.s2 == 0:
                continue
            if f == "alpha" and not self.alpha:
                continue
            out.append(f)
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "theta_E": {"s2": self.theta_E.s2, "omega": self.theta_E.omega, "nu": self.theta_E.nu},
            "theta_A": {"s2": self.theta_A.s2, "omega": self.theta_A.omega, "nu": self.theta_A.nu},
            "sigma": self.sigma,
            "alpha": list(self.alpha),
            "mass": self.mass,
            "force": {
                "kind": self.force.kind,
                "damping": self.force.damping,
                "stubborn": list(self.force.stubborn),
            },
            "trainable": list(self.trainable),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Hyperparameters":
        f = obj.get("force", {})
        return cls(
            theta_E=MaternParams(**obj["theta_E"]),
            theta_A=MaternParams(**obj["theta_A"]),
            sigma=float(obj.get("sigma", 0.0)),
            alpha=tuple(obj.get("alpha", ())),
            mass=float(obj.get("mass", 1.0)),
            force=ForceFamily(f.get("kind", "none"), float(f.get("damping", 0.0)),
                              tuple(f.get("stubborn", (0,)))),
            trainable=tuple(obj.get("trainable", FIELDS)),
        )


# ---------------------------------------------------------------------------
# Pair geometry


@dataclass(frozen=True)
class PairGeometry:
    """Pairwise differences for every observed row unit ``q = (snapshot, agent i)``.

    ``rx[q, k]`` is ``x_k - x_i``, ``rv[q, k]`` is ``v_k - v_i`` and
    ``r[q, k] = |x_k - x_i|``.
    """

    rx: np.ndarray
    rv: np.ndarray
    r: np.ndarray
    N: int
    d: int

    @property
    def n_units(self) -> int:
        return self.r.shape[0]

    @property
    def n(self) -> int:
        return self.n_units * self.d


def pair_geometry(ds: TrajectoryDataset) -> PairGeometry:
    X = ds.X.reshape(ds.M * ds.L, ds.N, ds.d)
    V = ds.V.reshape(ds.M * ds.L, ds.N, ds.d)
    rows = list(ds.agents)
    rx = X[:, None, :, :] - X[:, rows, None, :]
    rv = V[:, None, :, :] - V[:, rows, None, :]
    S, n_i = rx.shape[:2]
    rx = rx.reshape(S * n_i, ds.N, ds.d)
    rv = rv.reshape(S * n_i, ds.N, ds.d)
    return PairGeometry(rx, rv, np.linalg.norm(rx, axis=-1), ds.N, ds.d)


def _observed_rows(ds: TrajectoryDataset, arr):
    """Restrict ``(M, L, N, d)`` data to observed agents and flatten."""
    return arr[:, :, list(ds.agents), :].reshape(-1)


def residual(ds: TrajectoryDataset, hyper: Hyperparameters) -> np.ndarray:
    """Observation vector ``m Z + c V - F_alpha(Y)`` on observed rows."""
    force = hyper.force.force(ds.X, ds.V, hyper.alpha)
    res = hyper.mass * ds.A - force
    if hyper.force.damping:
        res = res + hyper.force.damping * ds.V
    return _observed_rows(ds, res)


def force_jacobian(ds: TrajectoryDataset, hyper: Hyperparameters) -> np.ndarray:
    """``dF/dalpha`` on observed rows, shape ``(n_alpha, n)``."""
    dF = hyper.force.dforce(ds.X, ds.V, hyper.alpha)
    return np.stack([_observed_rows(ds, g) for g in dF]) if len(dF) else np.zeros((0, ds.n_obs))


# ---------------------------------------------------------------------------
# Covariance assembly


_CHUNK_ELEMS = 4_000_000


def _contract(G, Ra, Rb):
    """``out[(c, a), (q, b)] = sum_{k, k'} Ra[c, k, a] G[c, k, (q, k')] Rb[q, k', b]``.

    ``G`` has shape ``(c, N, Q * N)``; both steps are batched matrix products.
    """
    c, N, d = Ra.shape
    Q = Rb.shape[0]
    T = np.matmul(Ra.transpose(0, 2, 1), G)                     # (c, d, Q*N)
    T = T.reshape(c * d, Q, N).transpose(1, 0, 2)                # (Q, c*d, N)
    out = np.matmul(T, Rb)                                       # (Q, c*d, d)
    return out.transpose(1, 0, 2).reshape(c * d, Q * d)


@dataclass
class KffParts:
    """Pieces of ``K_ff`` kept separate for gradients.

    All blocks are stored at unit amplitude: ``E`` and ``A`` are therefore
    also ``dK/ds2``, and ``s2 * dE`` is ``dK/domega_E``.
    """

    theta_E: MaternParams
    theta_A: MaternParams
    E: Optional[np.ndarray]
    A: Optional[np.ndarray]
    dE: Optional[np.ndarray] = None
    dA: Optional[np.ndarray] = None

    def matrix(self, s2_E=None, s2_A=None) -> np.ndarray:
        s2_E = self.theta_E.s2 if s2_E is None else s2_E
        s2_A = self.theta_A.s2 if s2_A is None else s2_A
        K = None
        if self.E is not None and s2_E:
            K = s2_E * self.E
        if self.A is not None and s2_A:
            K = s2_A * self.A if K is None else K + s2_A * self.A
        if K is None:
            n = (self.E if self.E is not None else self.A).shape[0]
            K = np.zeros((n, n))
        return K


def assemble_parts(
    geo: PairGeometry,
    theta_E: MaternParams,
    theta_A: MaternParams,
    with_grad: bool = False,
    fused: Optional[bool] = None,
) -> KffParts:
    """Assemble unit-amplitude energy/alignment blocks of ``K_ff``.

    Types whose amplitude is zero are skipped. The compiled loop is used
    when numba is present (``fused=None``); the vectorized path chunks over
    row units. Both compute only the upper block triangle.
    """
    if fused is None:
        fused = _fused.HAVE_NUMBA
    if fused:
        return _assemble_fused(geo, theta_E, theta_A, with_grad)
    Q, N, d = geo.n_units, geo.N, geo.d
    n = Q * d
    want = {}
    if theta_E.s2 > 0:
        want["E"] = (theta_E, geo.rx)
    if theta_A.s2 > 0:
        want["A"] = (theta_A, geo.rv)
    out = {k: np.zeros((n, n)) for k in want}
    if with_grad:
        out.update({"d" + k: np.zeros((n, n)) for k in want})
    if want and N > 1:
        chunk = max(1, _CHUNK_ELEMS // max(1, Q * N * N))
        rflat = geo.r
        for q0 in range(0, Q, chunk):
            q1 = min(Q, q0 + chunk)
            cols = slice(q0 * d, n)
            # lag[c, k, (q, k')] between pair (c, k) of this chunk and pair (q, k')
            lag = np.abs(rflat[q0:q1, :, None] - rflat[q0:].reshape(1, 1, -1))
            for key, (theta, R) in want.items():
                if with_grad:
                    G, dG = matern_lag_with_domega(theta, lag)
                    G = G / theta.s2
                    dG = dG / theta.s2
                    out["d" + key][q0 * d : q1 * d, cols] = _contract(dG, R[q0:q1], R[q0:])
                else:
                    G = unit_matern_lag(theta, lag)
                out[key][q0 * d : q1 * d, cols] = _contract(G, R[q0:q1], R[q0:])
    scale = 1.0 / (N * N)
    for key in list(out):
        M = np.triu(out[key])
        M += np.triu(M, 1).T
        M *= scale
        out[key] = M
        if not np.all(np.isfinite(M)):
            bad = np.argwhere(~np.isfinite(M))[0]
            raise NonFiniteError(f"non-finite covariance entry in block {key} at {tuple(bad)}")
    return KffParts(theta_E, theta_A, out.get("E"), out.get("A"), out.get("dE"), out.get("dA"))


def _assemble_fused(geo, theta_E, theta_A, with_grad):
    Q, N, d = geo.n_units, geo.N, geo.d
    n = Q * d
    useE, useA = theta_E.s2 > 0, theta_A.s2 > 0
    empty = np.zeros((0, 0))

    def buf(flag):
        return np.zeros((n, n)) if flag else empty

    KE, KA = buf(useE), buf(useA)
    dKE, dKA = buf(useE and with_grad), buf(useA and with_grad)
    if N > 1 and (useE or useA):
        _fused.kff_loop(
            np.ascontiguousarray(geo.r), np.ascontiguousarray(geo.rx), np.ascontiguousarray(geo.rv),
            useE, useA, float(theta_E.nu), float(theta_E.omega),
            float(theta_A.nu), float(theta_A.omega), with_grad, KE, KA, dKE, dKA,
        )
    scale = 1.0 / (N * N)
    out = {}
    for key, M, flag in (("E", KE, useE), ("A", KA, useA),
                         ("dE", dKE, useE and with_grad), ("dA", dKA, useA and with_grad)):
        if flag:
            M *= scale
            if not np.all(np.isfinite(M)):
                bad = np.argwhere(~np.isfinite(M))[0]
                raise NonFiniteError(f"non-finite covariance entry in block {key} at {tuple(bad)}")
            out[key] = M
    return KffParts(theta_E, theta_A, out.get("E"), out.get("A"), out.get("dE"), out.get("dA"))


def assemble_kff(ds: TrajectoryDataset, theta_E: MaternParams, theta_A: MaternParams) -> np.ndarray:
    """Prior covariance of ``f_phi(Y)`` over all observed rows, symmetrized."""
    K = assemble_parts(pair_geometry(ds), theta_E, theta_A).matrix()
    return 0.5 * (K + K.T)


def cross_cov(geo: PairGeometry, r_star, kind: str, theta: MaternParams) -> np.ndarray:
    """``Cov(f(Y), phi_kind(r*))`` of shape ``(n, len(r_star))``."""
    r_star = np.asarray(r_star, dtype=float).ravel()
    if np.any(r_star < 0):
        raise ValueError("r_star must be nonnegative")
    R = {"E": geo.rx, "A": geo.rv}[kind]
    G = matern_lag(theta, np.abs(geo.r[:, :, None] - r_star[None, None, :]))
    out = np.einsum("qkg,qka->qag", G, R) / geo.N
    return out.reshape(geo.n, r_star.size)


def assemble_cross_cov(ds: TrajectoryDataset, r_star, kind: str, theta: MaternParams) -> np.ndarray:
    if kind not in ("E", "A"):
        raise ValueError("kind must be 'E' or 'A'")
    return cross_cov(pair_geometry(ds), r_star, kind, theta)


# ---------------------------------------------------------------------------
# Likelihood


def cholesky_jitter(K: np.ndarray, sigma: float):
    """Cholesky factor of ``K + (sigma^2 + jitter) I`` with escalating jitter.

    Returns ``(L, jitter)``; ``jitter`` starts at 1e-6 when ``sigma == 0``
    and at zero otherwise, then grows tenfold up to 1e-2.
    """
    n = K.shape[0]
    jitter = JITTER0 if sigma == 0 else 0.0
    while True:
        A = K.copy()
        A[np.diag_indices(n)] += sigma * sigma + jitter
        c, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=1)
        if info == 0:
            return c, jitter
        jitter = JITTER0 if jitter == 0 else 10.0 * jitter
        if jitter > JITTER_MAX * (1 + 1e-12):
            raise IllConditionedError(
                f"Cholesky failed with jitter up to {JITTER_MAX:g} (n={n}, sigma={sigma:g})"
            )


@dataclass
class Factorization:
    L: np.ndarray
    jitter: float
    y: np.ndarray
    gamma: np.ndarray

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, B):
        return linalg.cho_solve((self.L, True), B, check_finite=False)

    def nlml(self) -> float:
        n = self.y.size
        return 0.5 * float(self.y @ self.gamma) + 0.5 * self.logdet + 0.5 * n * LOG2PI


def factorize(K: np.ndarray, sigma: float, y: np.ndarray) -> Factorization:
    L, jitter = cholesky_jitter(K, sigma)
    z = linalg.solve_triangular(L, y, lower=True, check_finite=False)
    gamma = linalg.solve_triangular(L, z, lower=True, trans="T", check_finite=False)
    return Factorization(L, jitter, y, gamma)


def _precision(L: np.ndarray) -> np.ndarray:
    """``(L L^T)^{-1}`` from the Cholesky factor, used only for trace terms."""
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise IllConditionedError("inverse from Cholesky factor failed")
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def _trace_term(gamma, Kinv, dK):
    # Tr((gamma gamma^T - Kinv) dK)
    return float(gamma @ (dK @ gamma)) - float(np.vdot(Kinv, dK))


@dataclass
class Evaluation:
    value: float
    grad: dict
    jitter: float


def nlml_and_grad(
    ds: TrajectoryDataset,
    hyper: Hyperparameters,
    parts: Optional[KffParts] = None,
    need_grad: bool = True,
    geo: Optional[PairGeometry] = None,
) -> Evaluation:
    """NLML and its natural-scale partials over the active trainable fields.

    ``parts`` may be passed when the length-scales and smoothness match
    ``hyper``; the amplitudes are always taken from ``hyper``.
    """
    fields = hyper.active_trainable if need_grad else ()
    need_theta = any(f in fields for f in ("s2_E", "omega_E", "s2_A", "omega_A"))
    need_dw = any(f in fields for f in ("omega_E", "omega_A"))
    if parts is None or (need_dw and parts.dE is None and parts.dA is None):
        geo = pair_geometry(ds) if geo is None else geo
        parts = assemble_parts(geo, hyper.theta_E, hyper.theta_A, with_grad=need_dw)
    K = parts.matrix(hyper.theta_E.s2, hyper.theta_A.s2)
    y = residual(ds, hyper)
    fac = factorize(K, hyper.sigma, y)
    value = fac.nlml()
    grad = {}
    if not fields:
        return Evaluation(value, grad, fac.jitter)
    g = fac.gamma
    Kinv = _precision(fac.L) if (need_theta or "sigma" in fields) else None
    if "s2_E" in fields:
        grad["s2_E"] = -0.5 * _trace_term(g, Kinv, parts.E) if parts.E is not None else 0.0
    if "omega_E" in fields:
        grad["omega_E"] = -0.5 * hyper.theta_E.s2 * _trace_term(g, Kinv, parts.dE)
    if "s2_A" in fields:
        grad["s2_A"] = -0.5 * _trace_term(g, Kinv, parts.A) if parts.A is not None else 0.0
    if "omega_A" in fields:
        grad["omega_A"] = -0.5 * hyper.theta_A.s2 * _trace_term(g, Kinv, parts.dA)
    if "sigma" in fields:
        grad["sigma"] = -hyper.sigma * (float(g @ g) - float(np.trace(Kinv)))
    if "alpha" in fields:
        grad["alpha"] = -(force_jacobian(ds, hyper) @ g)
    if "mass" in fields:
        grad["mass"] = float(g @ _observed_rows(ds, ds.A))
    return Evaluation(value, grad, fac.jitter)


def nlml(ds: TrajectoryDataset, hyper: Hyperparameters) -> float:
    """Negative log marginal likelihood of the residual observations."""
    return nlml_and_grad(ds, hyper, need_grad=False).value


def nlml_grad(ds: TrajectoryDataset, hyper: Hyperparameters) -> dict:
    """Natural-scale NLML partials keyed by field name, trainable fields only."""
    return nlml_and_grad(ds, hyper).grad


def gradient_check(ds: TrajectoryDataset, hyper: Hyperparameters, rel_step: float = 1e-6) -> dict:
    """Compare analytic partials with central differences.

    Each scalar entry is perturbed by ``rel_step * max(|value|, 1)``; the
    clamp at zero for ``mass`` is avoided by stepping forward only when
    needed. Returns ``{"analytic", "numeric", "max_rel_err"}`` with the error
    measured as ``||num - ana||_inf / ||ana||_inf``.
    """
    grad = nlml_grad(ds, hyper)
    ana, num = [], []
    for f in hyper.active_trainable:
        base = np.atleast_1d(np.asarray(hyper.get(f), dtype=float))
        g = np.atleast_1d(grad[f])
        for k in range(base.size):
            h = rel_step * max(abs(base[k]), 1.0)

            def at(v):
                x = base.copy()
                x[k] = v
                return nlml(ds, hyper.set(f, x if f == "alpha" else x[0]))

            lo = base[k] - h
            if f in LOG_FIELDS + ("mass",) and lo <= 0:
                d = (-3 * at(base[k]) + 4 * at(base[k] + h) - at(base[k] + 2 * h)) / (2 * h)
            else:
                d = (at(base[k] + h) - at(lo)) / (2 * h)
            ana.append(float(g[k]))
            num.append(float(d))
    ana, num = np.asarray(ana), np.asarray(num)
    scale = np.max(np.abs(ana)) if ana.size else 0.0
    err = float(np.max(np.abs(num - ana)) / scale) if scale > 0 else float(np.max(np.abs(num), initial=0.0))
    return {"analytic": ana, "numeric": num, "max_rel_err": err}


# ---------------------------------------------------------------------------
# Posterior


@dataclass
class KernelEstimate:
    """Posterior mean and variance of both kernels on a radius grid.

    ``cov`` (optional) is the joint covariance of ``[phi_E(r); phi_A(r)]``.
    """

    r: np.ndarray
    mean_E: np.ndarray
    var_E: np.ndarray
    mean_A: np.ndarray
    var_A: np.ndarray
    theta_E: MaternParams
    theta_A: MaternParams
    cov: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def std_E(self):
        return np.sqrt(np.maximum(self.var_E, 0.0))

    @property
    def std_A(self):
        return np.sqrt(np.maximum(self.var_A, 0.0))


def posterior_kernel(
    ds: TrajectoryDataset, hyper: Hyperparameters, r_grid, full_cov: bool = False
) -> KernelEstimate:
    """Posterior of ``phi_E`` and ``phi_A`` at ``r_grid``.

    Follows the Cholesky route: ``L = chol(K_ff + sigma^2 I)``,
    ``gamma = L^T \\ (L \\ y)``, mean ``K_*^T gamma`` and variance
    ``K(r*, r*) - v^T v`` with ``v = L \\ K_*``.
    """
    r_grid = np.asarray(r_grid, dtype=float).ravel()
    geo = pair_geometry(ds)
    K = assemble_parts(geo, hyper.theta_E, hyper.theta_A).matrix()
    fac = factorize(K, hyper.sigma, residual(ds, hyper))
    out = {}
    vs = {}
    for kind, theta in (("E", hyper.theta_E), ("A", hyper.theta_A)):
        Ks = cross_cov(geo, r_grid, kind, theta)
        v = linalg.solve_triangular(fac.L, Ks, lower=True, check_finite=False)
        out["mean_" + kind] = Ks.T @ fac.gamma
        out["var_" + kind] = theta.s2 - np.einsum("ij,ij->j", v, v)
        vs[kind] = v
    cov = None
    if full_cov:
        g = r_grid.size
        lag = np.abs(r_grid[:, None] - r_grid[None, :])
        cov = np.empty((2 * g, 2 * g))
        cov[:g, :g] = matern_lag(hyper.theta_E, lag) - vs["E"].T @ vs["E"]
        cov[g:, g:] = matern_lag(hyper.theta_A, lag) - vs["A"].T @ vs["A"]
        cov[:g, g:] = -vs["E"].T @ vs["A"]
        cov[g:, :g] = cov[:g, g:].T
        cov = 0.5 * (cov + cov.T)
    return KernelEstimate(r_grid, out["mean_E"], out["var_E"], out["mean_A"], out["var_A"],
                          hyper.theta_E, hyper.theta_A, cov)


class FittedGP:
    """Posterior mean kernels as cheap callables.

    The mean at any radius is a weighted sum of covariances centred at the
    observed pair radii, so trajectories can be predicted without a grid.
    Instances are immutable after construction.
    """

    def __init__(self, ds: TrajectoryDataset, hyper: Hyperparameters):
        self.hyper = hyper
        geo = pair_geometry(ds)
        K = assemble_parts(geo, hyper.theta_E, hyper.theta_A).matrix()
        fac = factorize(K, hyper.sigma, residual(ds, hyper))
        self.jitter = fac.jitter
        g = fac.gamma.reshape(geo.n_units, 1, geo.d)
        cE = np.sum(geo.rx * g, axis=-1).ravel() / geo.N
        cA = np.sum(geo.rv * g, axis=-1).ravel() / geo.N
        radii = geo.r.ravel()
        keep = radii > 0
        self._radii = radii[keep]
        self._cE = cE[keep] if hyper.theta_E.s2 > 0 else np.zeros(keep.sum())
        self._cA = cA[keep] if hyper.theta_A.s2 > 0 else np.zeros(keep.sum())
        self._radii.setflags(write=False)

    def _eval(self, theta, coef, r):
        r = np.asarray(r, dtype=float)
        if not np.any(coef):
            return np.zeros_like(r)
        flat = r.ravel()
        out = np.empty(flat.size)
        step = max(1, 2_000_000 // max(1, self._radii.size))
        for s in range(0, flat.size, step):
            lag = np.abs(flat[s : s + step, None] - self._radii[None, :])
            out[s : s + step] = matern_lag(theta, lag) @ coef
        return out.reshape(r.shape)

    def phi_E(self, r):
        return self._eval(self.hyper.theta_E, self._cE, r)

    def phi_A(self, r):
        return self._eval(self.hyper.theta_A, self._cA, r)
