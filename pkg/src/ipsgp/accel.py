"""Matrix-free acceleration: PCG, randomized Nyström preconditioning and SLQ.

The accelerated NLML replaces the Cholesky factorization by one block PCG
solve whose right-hand sides are the residual and the preconditioned
Rademacher probes. The same solves give the quadratic term, the Lanczos
quadrature for the log-determinant and the Hutchinson trace estimates in
the gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .covfunc import matern_lag, matern_lag_with_domega
from .errors import NonSPDError, NumericalError
from .gp import (
    JITTER0, LOG2PI, Hyperparameters, KffParts, PairGeometry, _observed_rows,
    assemble_parts, force_jacobian, pair_geometry, residual,
)
from .systems import TrajectoryDataset


class LinearOperator:
    """Symmetric linear map given by a matrix-vector product.

    ``matvec`` must accept arrays of shape ``(n,)`` or ``(n, k)``.
    """

    def __init__(self, n: int, matvec: Callable[[np.ndarray], np.ndarray]):
        self.n = int(n)
        self._matvec = matvec

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        return self._matvec(v)

    __matmul__ = matvec

    @classmethod
    def dense(cls, A, shift: float = 0.0) -> "LinearOperator":
        A = np.asarray(A, dtype=float)
        if shift:
            return cls(A.shape[0], lambda v: A @ v + shift * v)
        return cls(A.shape[0], lambda v: A @ v)

    def shifted(self, shift: float) -> "LinearOperator":
        return LinearOperator(self.n, lambda v: self._matvec(v) + shift * v)

    def to_dense(self) -> np.ndarray:
        return self.matvec(np.eye(self.n))


# ---------------------------------------------------------------------------
# Nyström preconditioner


def nystrom_rank(n: int) -> int:
    """Rank rule ``floor(30 / log 12 * log(n / 10))`` clipped to ``[1, n]``."""
    if n <= 10:
        return max(1, min(n, 1))
    return int(min(n, max(1, math.floor(30.0 / math.log(12.0) * math.log(n / 10.0)))))


@dataclass
class NystromPreconditioner:
    """``P = U diag((Lambda + s2) / (lambda_r + s2)) U^T + (I - U U^T)``."""

    U: np.ndarray
    Lambda: np.ndarray
    sigma2: float
    lambda_r: float
    logdet_P: float
    shift: float = 0.0

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def _scale(self, power: float) -> np.ndarray:
        ratio = (self.Lambda + self.sigma2) / (self.lambda_r + self.sigma2)
        return ratio**power - 1.0

    def _apply(self, v, power):
        v = np.asarray(v, dtype=float)
        c = self._scale(power)
        coef = self.U.T @ v
        coef = coef * (c[:, None] if coef.ndim == 2 else c)
        return v + self.U @ coef

    def apply_inverse(self, v):
        return self._apply(v, -1.0)

    def apply_sqrt(self, v):
        return self._apply(v, 0.5)

    def apply_inv_sqrt(self, v):
        return self._apply(v, -0.5)

    def dense(self) -> np.ndarray:
        return self._apply(np.eye(self.U.shape[0]), 1.0)


def nystrom_precond(op: LinearOperator, sigma2: float, rank: int, seed=0) -> NystromPreconditioner:
    """Randomized Gaussian Nyström preconditioner for ``op + sigma2 I``.

    ``op`` is the unshifted PSD operator. A stabilizing shift
    ``nu = eps * ||Y||_F`` is applied to the sketch and grows tenfold if the
    inner Cholesky fails (at most three times).
    """
    n = op.n
    if not 1 <= rank <= n:
        raise ValueError(f"rank must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    Omega = rng.standard_normal((n, rank))
    Qm, _ = np.linalg.qr(Omega)
    Y = op.matvec(Qm)
    nu = np.finfo(float).eps * np.linalg.norm(Y)
    if nu == 0:
        nu = np.finfo(float).tiny
    for _ in range(4):
        Ynu = Y + nu * Qm
        S = Qm.T @ Ynu
        try:
            C = linalg.cholesky(0.5 * (S + S.T), lower=False)
            break
        except linalg.LinAlgError:
            nu *= 10.0
    else:
        raise NumericalError("Nyström inner Cholesky failed after shift escalation")
    B = linalg.solve_triangular(C, Ynu.T, trans="T", lower=False).T
    U, svals, _ = np.linalg.svd(B, full_matrices=False)
    Lam = np.maximum(0.0, svals**2 - nu)
    lam_r = float(Lam[-1])
    logdet = float(np.sum(np.log((Lam + sigma2) / (lam_r + sigma2))))
    return NystromPreconditioner(U, Lam, float(sigma2), lam_r, logdet, float(nu))


# ---------------------------------------------------------------------------
# Preconditioned conjugate gradients


@dataclass
class PCGResult:
    """Solution and per-column Lanczos coefficients.

    ``alphas[j]`` and ``betas[j]`` are the step and direction-update
    coefficients of column ``j`` up to its convergence.
    """

    x: np.ndarray
    alphas: list
    betas: list
    iterations: np.ndarray
    converged: np.ndarray
    residual_norms: list = field(default_factory=list)

    @property
    def lanczos_coeffs(self):
        return list(zip(self.alphas, self.betas))


def pcg(op: LinearOperator, precond, b, x0=None, tol: float = 1e-6, max_iter=500) -> PCGResult:
    """Preconditioned CG for ``op x = b``; ``b`` may hold several columns.

    ``precond`` is ``None`` or exposes ``apply_inverse``. Each column stops
    once ``||b - A x|| <= tol ||b||`` or after ``max_iter`` steps, which may
    be given per column.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    n, k = B.shape
    apply_p = (lambda v: v) if precond is None else precond.apply_inverse
    X = np.zeros((n, k)) if x0 is None else np.array(x0, dtype=float).reshape(n, k)
    R = B - op.matvec(X) if x0 is not None else B.copy()
    bnorm = np.linalg.norm(B, axis=0)
    target = tol * np.where(bnorm > 0, bnorm, 1.0)
    active = np.linalg.norm(R, axis=0) > target
    active &= bnorm > 0
    Zr = apply_p(R)
    Pd = Zr.copy()
    rz = np.einsum("ij,ij->j", R, Zr)
    alphas = [[] for _ in range(k)]
    betas = [[] for _ in range(k)]
    iters = np.zeros(k, dtype=int)
    col_max = np.broadcast_to(np.asarray(max_iter, dtype=int), (k,))
    active &= col_max > 0
    history = [np.linalg.norm(R, axis=0)]
    for _ in range(int(col_max.max(initial=0))):
        if not active.any():
            break
        cols = np.flatnonzero(active)
        APd = op.matvec(Pd[:, cols])
        pAp = np.einsum("ij,ij->j", Pd[:, cols], APd)
        if np.any(pAp <= 0):
            raise NonSPDError("non-positive curvature d^T A d <= 0 met in PCG")
        alpha = rz[cols] / pAp
        X[:, cols] += alpha * Pd[:, cols]
        R[:, cols] -= alpha * APd
        Zc = apply_p(R[:, cols])
        rz_new = np.einsum("ij,ij->j", R[:, cols], Zc)
        beta = rz_new / rz[cols]
        Pd[:, cols] = Zc + beta * Pd[:, cols]
        rz[cols] = rz_new
        rn = np.linalg.norm(R[:, cols], axis=0)
        for t, j in enumerate(cols):
            alphas[j].append(float(alpha[t]))
            iters[j] += 1
            if rn[t] <= target[j]:
                active[j] = False
            else:
                betas[j].append(float(beta[t]))
                if iters[j] >= col_max[j]:
                    active[j] = False
        history.append(np.linalg.norm(R, axis=0))
    converged = np.linalg.norm(R, axis=0) <= target
    x = X[:, 0] if vec else X
    return PCGResult(x, alphas, betas, iters, converged, history)


# ---------------------------------------------------------------------------
# Lanczos quadrature


def cg_tridiagonal(alphas, betas):
    """Lanczos tridiagonal ``(diag, offdiag)`` implied by CG coefficients."""
    a = np.asarray(alphas, dtype=float)
    b = np.asarray(betas, dtype=float)[: max(0, a.size - 1)]
    diag = 1.0 / a
    diag[1:] += b / a[:-1]
    off = np.sqrt(b) / a[:-1]
    return diag, off


def lanczos(op: LinearOperator, v0, m: int, reorthogonalize: bool = True, tol: float = 1e-12):
    """``m`` Lanczos steps from ``v0``; stops early on breakdown.

    Returns ``(diag, offdiag, basis)`` with ``basis`` of shape ``(n, k)``.
    """
    v = np.asarray(v0, dtype=float)
    v = v / np.linalg.norm(v)
    n = v.size
    m = min(m, n)
    Vb = np.zeros((n, m))
    diag, off = [], []
    Vb[:, 0] = v
    beta_prev = 0.0
    scale = 0.0
    for j in range(m):
        w = op.matvec(Vb[:, j])
        a = float(Vb[:, j] @ w)
        diag.append(a)
        w = w - a * Vb[:, j]
        if j > 0:
            w -= beta_prev * Vb[:, j - 1]
        if reorthogonalize:
            for _ in range(2):
                w -= Vb[:, : j + 1] @ (Vb[:, : j + 1].T @ w)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(a), beta)
        if j == m - 1 or beta <= tol * max(scale, 1.0):
            break
        off.append(beta)
        Vb[:, j + 1] = w / beta
        beta_prev = beta
    k = len(diag)
    return np.asarray(diag), np.asarray(off[: k - 1]), Vb[:, :k]


def quadrature_log(diag, off) -> float:
    """``sum_j W[0, j]^2 log(theta_j)`` for the tridiagonal ``(diag, off)``."""
    if diag.size == 1:
        return float(np.log(diag[0]))
    theta, W = linalg.eigh_tridiagonal(diag, off)
    if np.any(theta <= 0):
        raise NonSPDError("Lanczos quadrature met a non-positive Ritz value")
    return float(np.sum(W[0] ** 2 * np.log(theta)))


@dataclass
class SLQResult:
    estimate: float
    gammas: np.ndarray
    logdet_P: float
    stderr: float


def rademacher(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=(n, k)).astype(float) * 2.0 - 1.0


def probe_starts(n: int, n_probes: int, rng: np.random.Generator, basis=None):
    """Unit start vectors and weights for quadrature-based trace estimates.

    ``tr f(A) ~ sum_k weights[k] * s_k^T f(A) s_k``. Without ``basis`` the
    starts are normalized Rademacher probes with weight ``n / n_probes``.
    With an orthonormal ``basis`` its columns enter with weight one and the
    probes are projected onto the orthogonal complement (deflation), which
    removes the variance carried by the dominant subspace.

    Returns ``(S, weights, n_basis)``; the first ``n_basis`` columns of
    ``S`` are the basis vectors.
    """
    Z = rademacher(n, n_probes, rng)
    if basis is None or basis.shape[1] == 0:
        return Z / math.sqrt(n), np.full(n_probes, n / n_probes), 0
    Zp = Z - basis @ (basis.T @ Z)
    norms = np.linalg.norm(Zp, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    S = np.column_stack([basis, Zp / norms])
    w = np.concatenate([np.ones(basis.shape[1]), norms**2 / n_probes])
    return S, w, basis.shape[1]


def _stderr(per, n_basis):
    res = per[n_basis:]
    if res.size < 2:
        return math.nan
    return float(np.std(res, ddof=1) * res.size / math.sqrt(res.size))


def slq_logdet(
    op_shifted: LinearOperator,
    precond: Optional[NystromPreconditioner] = None,
    n_probes: int = 10,
    m_coeffs: Optional[int] = None,
    seed=0,
    method: str = "lanczos",
    variance_reduced: bool = False,
) -> SLQResult:
    """Stochastic Lanczos quadrature estimate of ``log det(op_shifted)``.

    Probes ``z`` are Rademacher vectors. With a preconditioner ``P`` the
    quadrature runs on ``P^{-1/2} A P^{-1/2}`` started from ``z`` and
    ``log det P`` is added back. ``method='lanczos'`` uses explicit Lanczos
    with full reorthogonalization; ``method='pcg'`` reads the tridiagonal
    off the coefficients of a PCG run on ``A x = P^{1/2} z``.
    ``variance_reduced`` deflates the probes against the range of ``P``
    (see :func:`probe_starts`).
    """
    n = op_shifted.n
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    m = min(50, n - 1) if m_coeffs is None else m_coeffs
    m = max(1, min(m, n))
    if m < 1:
        raise ValueError("m_coeffs must be >= 1")
    rng = np.random.default_rng(seed)
    basis = precond.U if (variance_reduced and precond is not None) else None
    S, weights, nb = probe_starts(n, n_probes, rng, basis)
    quad = np.empty(S.shape[1])
    if method == "lanczos":
        if precond is None:
            A_hat = op_shifted
        else:
            A_hat = LinearOperator(
                n, lambda v: precond.apply_inv_sqrt(op_shifted.matvec(precond.apply_inv_sqrt(v)))
            )
        for i in range(S.shape[1]):
            dg, of, _ = lanczos(A_hat, S[:, i], m, reorthogonalize=True)
            quad[i] = quadrature_log(dg, of)
    elif method == "pcg":
        Bp = S if precond is None else precond.apply_sqrt(S)
        res = pcg(op_shifted, precond, Bp, tol=1e-14, max_iter=m)
        for i in range(S.shape[1]):
            dg, of = cg_tridiagonal(res.alphas[i], res.betas[i])
            quad[i] = quadrature_log(dg, of)
    else:
        raise ValueError("method must be 'lanczos' or 'pcg'")
    ldp = 0.0 if precond is None else precond.logdet_P
    per = weights * quad
    est = ldp + float(np.sum(per))
    return SLQResult(est, quad, ldp, _stderr(per, nb))


# ---------------------------------------------------------------------------
# Covariance operators


class KffOperator:
    """Products with ``K_ff`` and its length-scale derivatives without storing them.

    Each product recomputes the pair-lag covariances in row chunks, so
    memory stays ``O(n)`` beyond a chunk buffer.
    """

    def __init__(self, geo: PairGeometry, theta_E, theta_A, chunk_elems: int = 4_000_000):
        self.geo = geo
        self.theta_E = theta_E
        self.theta_A = theta_A
        self.n = geo.n
        self.chunk_elems = chunk_elems

    def _apply(self, V, which):
        geo = self.geo
        Q, N, d = geo.n_units, geo.N, geo.d
        V = np.asarray(V, dtype=float)
        vec = V.ndim == 1
        Vm = V.reshape(Q, d, -1)
        out = np.zeros_like(Vm)
        rflat = geo.r.reshape(-1)
        step = max(1, self.chunk_elems // max(1, Q * N * N))
        for kind, theta, R in (("E", self.theta_E, geo.rx), ("A", self.theta_A, geo.rv)):
            if theta.s2 == 0 or (which != "K" and which != "d" + kind):
                continue
            u = np.einsum("qka,qaj->qkj", R, Vm).reshape(Q * N, -1)
            w = np.empty_like(u)
            for q0 in range(0, Q, step):
                q1 = min(Q, q0 + step)
                lag = np.abs(geo.r[q0:q1].reshape(-1)[:, None] - rflat[None, :])
                if which == "K":
                    G = matern_lag(theta, lag)
                else:
                    G = matern_lag_with_domega(theta, lag)[1]
                w[q0 * N : q1 * N] = G @ u
            out += np.einsum("qka,qkj->qaj", R, w.reshape(Q, N, -1))
        out /= N * N
        out = out.reshape(Q * d, -1)
        return out[:, 0] if vec else out

    def matvec(self, V):
        return self._apply(V, "K")

    def dmatvec(self, V, kind: str):
        """Product with ``dK/domega`` of type ``kind`` (amplitude included)."""
        return self._apply(V, "d" + kind)


# ---------------------------------------------------------------------------
# Accelerated NLML


@dataclass
class AccelConfig:
    """Settings of the accelerated backend.

    ``rank=None`` applies the logarithmic rank rule. ``variance_reduced``
    deflates the probes against the preconditioner range, at the price of
    ``rank`` extra right-hand sides. Probe solves stop after
    ``m_coeffs`` steps (``None`` means ``min(50, n - 1)``); the solve for the
    residual runs to ``tol``. ``dense_limit`` is the
    largest ``n`` for which covariance blocks are stored densely; beyond it
    products are computed blockwise on the fly.
    """

    rank: Optional[int] = None
    n_probes: int = 10
    m_coeffs: Optional[int] = None
    variance_reduced: bool = False
    tol: float = 1e-6
    max_iter: int = 500
    seed: int = 0
    dense_limit: int = 20_000


@dataclass
class AccelDiagnostics:
    value: float
    quad: float
    logdet: float
    logdet_stderr: float
    iterations: np.ndarray
    rank: int


def accelerated_nlml(
    ds: TrajectoryDataset,
    hyper: Hyperparameters,
    config: Optional[AccelConfig] = None,
    parts: Optional[KffParts] = None,
    need_grad: bool = True,
    diagnostics: bool = False,
):
    """Stochastic NLML and gradient over the active trainable fields.

    Returns ``(value, grad)``, or ``(value, grad, AccelDiagnostics)`` when
    ``diagnostics`` is set. All randomness derives from ``config.seed``.
    """
    config = AccelConfig() if config is None else config
    fields = hyper.active_trainable if need_grad else ()
    need_dw = any(f in fields for f in ("omega_E", "omega_A"))
    geo = None
    n = ds.n_obs
    if parts is None or (need_dw and parts.dE is None and parts.dA is None):
        if n <= config.dense_limit:
            geo = pair_geometry(ds)
            parts = assemble_parts(geo, hyper.theta_E, hyper.theta_A, with_grad=need_dw)
        else:
            parts = None
    s2E, s2A = hyper.theta_E.s2, hyper.theta_A.s2
    if parts is not None:
        K = parts.matrix(s2E, s2A)
        K_op = LinearOperator.dense(K)

        def dK(kind, V):
            M = parts.dE if kind == "E" else parts.dA
            s2 = s2E if kind == "E" else s2A
            return s2 * (M @ V)

        def unitK(kind, V):
            return (parts.E if kind == "E" else parts.A) @ V
    else:
        geo = pair_geometry(ds) if geo is None else geo
        kop = KffOperator(geo, hyper.theta_E, hyper.theta_A)
        K_op = LinearOperator(n, kop.matvec)
        kE = KffOperator(geo, hyper.theta_E.replace(s2=1.0), hyper.theta_A.replace(s2=0.0))
        kA = KffOperator(geo, hyper.theta_E.replace(s2=0.0), hyper.theta_A.replace(s2=1.0))

        def dK(kind, V):
            return kop.dmatvec(V, kind)

        def unitK(kind, V):
            return (kE if kind == "E" else kA).matvec(V)

    shift = hyper.sigma**2 + (JITTER0 if hyper.sigma == 0 else 0.0)
    A_op = K_op.shifted(shift)
    rank = nystrom_rank(n) if config.rank is None else min(config.rank, n)
    ss = np.random.SeedSequence(config.seed)
    s_nys, s_probe = ss.spawn(2)
    P = nystrom_precond(K_op, shift, rank, np.random.default_rng(s_nys))
    basis = P.U if config.variance_reduced else None
    S, weights, nb = probe_starts(n, config.n_probes, np.random.default_rng(s_probe), basis)
    k = S.shape[1]
    y = residual(ds, hyper)
    rhs = np.column_stack([y, P.apply_sqrt(S)])
    m = min(50, n - 1) if config.m_coeffs is None else max(1, min(config.m_coeffs, n))
    caps = np.full(k + 1, min(m, config.max_iter))
    caps[0] = config.max_iter
    sol = pcg(A_op, P, rhs, tol=config.tol, max_iter=caps)
    if not sol.converged[0]:
        raise NumericalError(f"PCG did not reach tol={config.tol:g} in {config.max_iter} iterations")
    gamma = sol.x[:, 0]
    Xp = sol.x[:, 1:]
    quad_i = np.empty(k)
    for i in range(k):
        dg, of = cg_tridiagonal(sol.alphas[i + 1], sol.betas[i + 1])
        quad_i[i] = quadrature_log(dg, of)
    per = weights * quad_i
    logdet = P.logdet_P + float(np.sum(per))
    quad = float(y @ gamma)
    value = 0.5 * quad + 0.5 * logdet + 0.5 * n * LOG2PI
    grad = {}
    if fields:
        Pz = P.apply_inv_sqrt(S) * weights

        def trace_est(prod):
            # Tr(K^-1 D) ~ sum_k w_k (P^{-1/2} s_k)^T D K^-1 P^{1/2} s_k
            return float(np.sum(np.einsum("ij,ij->j", Pz, prod)))

        for kind in ("E", "A"):
            if "s2_" + kind in fields:
                Dg = unitK(kind, np.column_stack([gamma, Xp]))
                grad["s2_" + kind] = -0.5 * (float(gamma @ Dg[:, 0]) - trace_est(Dg[:, 1:]))
            if "omega_" + kind in fields:
                Dg = dK(kind, np.column_stack([gamma, Xp]))
                grad["omega_" + kind] = -0.5 * (float(gamma @ Dg[:, 0]) - trace_est(Dg[:, 1:]))
        if "sigma" in fields:
            grad["sigma"] = -hyper.sigma * (float(gamma @ gamma) - trace_est(Xp))
        if "alpha" in fields:
            grad["alpha"] = -(force_jacobian(ds, hyper) @ gamma)
        if "mass" in fields:
            grad["mass"] = float(gamma @ _observed_rows(ds, ds.A))
    if diagnostics:
        se = _stderr(per, nb)
        return value, grad, AccelDiagnostics(value, quad, logdet, se, sol.iterations, rank)
    return value, grad
