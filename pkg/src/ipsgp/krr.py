"""Representer-theorem coefficients for the kernel ridge regression estimator.

This module rebuilds the pairwise-difference matrices with plain loops and
solves the ridge system directly, so it can serve as an independent check
on the posterior mean computed in :mod:`ipsgp.gp`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .covfunc import MaternParams, gram
from .gp import Hyperparameters, posterior_kernel, residual
from .systems import TrajectoryDataset


@dataclass
class RepresenterCoefficients:
    """Basis coefficients over the pairwise distances of the data.

    Entry ``p`` of every array belongs to the pair ``(i, j)`` of one
    snapshot, enumerated snapshot-major, then ``i``, then ``j``. Only rows
    ``i`` of observed agents are present. Diagonal pairs have radius zero
    and zero difference vectors, so their coefficients vanish.
    """

    c_rx: np.ndarray
    c_rv: np.ndarray
    r_x: np.ndarray
    r_v: np.ndarray

    def __len__(self) -> int:
        return self.c_rx.size


@dataclass
class PairBlocks:
    """Block-diagonal difference matrices ``r_X`` and ``r_V``.

    Both have shape ``(n, P)`` with ``n = d * (observed rows)`` and one
    column per pair. ``radii_x`` and ``radii_v`` hold the pair distances.
    """

    r_X: np.ndarray
    r_V: np.ndarray
    radii_x: np.ndarray
    radii_v: np.ndarray


def pair_blocks(ds: TrajectoryDataset) -> PairBlocks:
    """Explicit ``r_X``, ``r_V`` in the snapshot/agent/dimension row order."""
    d, N = ds.d, ds.N
    agents = list(ds.agents)
    X, V = ds.X, ds.V
    n_rows = ds.M * ds.L * len(agents)
    P = n_rows * N
    r_X = np.zeros((n_rows * d, P))
    r_V = np.zeros((n_rows * d, P))
    rx = np.zeros(P)
    rv = np.zeros(P)
    row = 0
    for m in range(ds.M):
        for l in range(ds.L):
            for i in agents:
                for j in range(N):
                    col = row * N + j
                    dx = X[m, l, j] - X[m, l, i]
                    dv = V[m, l, j] - V[m, l, i]
                    r_X[row * d:(row + 1) * d, col] = dx
                    r_V[row * d:(row + 1) * d, col] = dv
                    rx[col] = np.sqrt(dx @ dx)
                    rv[col] = np.sqrt(dv @ dv)
                row += 1
    return PairBlocks(r_X, r_V, rx, rv)


def covariance_identity_residual(ds: TrajectoryDataset, theta_E: MaternParams,
                                 theta_A: MaternParams, kff: Optional[np.ndarray] = None) -> float:
    """Relative Frobenius gap of ``r_X K^E r_X^T + r_V K^A r_V^T = N^2 K_ff``.

    ``kff`` defaults to the matrix assembled by :func:`ipsgp.gp.assemble_kff`.
    """
    from .gp import assemble_kff

    pb = pair_blocks(ds)
    KE = gram(theta_E, pb.radii_x)
    KA = gram(theta_A, pb.radii_x)
    lhs = pb.r_X @ KE @ pb.r_X.T + pb.r_V @ KA @ pb.r_V.T
    rhs = ds.N**2 * (assemble_kff(ds, theta_E, theta_A) if kff is None else kff)
    return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))


def _target(ds: TrajectoryDataset, target) -> np.ndarray:
    if target is None:
        return ds.A[:, :, list(ds.agents), :].reshape(-1)
    target = np.asarray(target, dtype=float).ravel()
    if target.size != ds.n_obs:
        raise ValueError(f"target has {target.size} entries, expected {ds.n_obs}")
    return target


def representer_coefficients(
    ds: TrajectoryDataset,
    theta_E: MaternParams,
    theta_A: MaternParams,
    lam: float,
    target=None,
    lam_A: Optional[float] = None,
    coupled: bool = False,
) -> RepresenterCoefficients:
    """Coefficients of the regularized least-squares minimizer.

    With a common ``lam`` the closed form
    ``c = (1/N) r^T (K_ff + lam N M L I)^{-1} Z`` is used. ``coupled=True``
    solves the joint normal equations in both coefficient vectors instead,
    which also covers ``lam_A != lam``; it is dense in ``2 P`` unknowns and
    meant for small instances.

    Parameters
    ----------
    target : array, optional
        Right-hand side in place of the observed accelerations, e.g. the
        residual after removing non-collective forces.
    lam_A : float, optional
        Penalty on the alignment kernel (defaults to ``lam``).
    """
    lam_E = float(lam)
    lam_A = lam_E if lam_A is None else float(lam_A)
    if lam_E <= 0 or lam_A <= 0:
        raise ValueError("regularization must be positive")
    if lam_A != lam_E and not coupled:
        raise ValueError("distinct penalties need coupled=True")
    N, M, L = ds.N, ds.M, ds.L
    Z = _target(ds, target)
    pb = pair_blocks(ds)
    KE = gram(theta_E, pb.radii_x)
    KA = gram(theta_A, pb.radii_x)
    if not coupled:
        K = (pb.r_X @ KE @ pb.r_X.T + pb.r_V @ KA @ pb.r_V.T) / N**2
        K = 0.5 * (K + K.T)
        K[np.diag_indices_from(K)] += lam_E * N * M * L
        c, low = linalg.cho_factor(K, lower=True)
        w = linalg.cho_solve((c, low), Z)
        return RepresenterCoefficients(pb.r_X.T @ w / N, pb.r_V.T @ w / N, pb.radii_x, pb.radii_v)
    P = pb.radii_x.size
    RXX = pb.r_X.T @ pb.r_X
    RXV = pb.r_X.T @ pb.r_V
    RVV = pb.r_V.T @ pb.r_V
    S = np.empty((2 * P, 2 * P))
    S[:P, :P] = RXX @ KE
    S[:P, P:] = RXV @ KA
    S[P:, :P] = RXV.T @ KE
    S[P:, P:] = RVV @ KA
    scale = N**3 * M * L
    S[np.arange(P), np.arange(P)] += lam_E * scale
    S[np.arange(P, 2 * P), np.arange(P, 2 * P)] += lam_A * scale
    rhs = N * np.concatenate([pb.r_X.T @ Z, pb.r_V.T @ Z])
    sol = linalg.solve(S, rhs)
    return RepresenterCoefficients(sol[:P], sol[P:], pb.radii_x, pb.radii_v)


def krr_estimate(coeffs: RepresenterCoefficients, theta_E: MaternParams, theta_A: MaternParams, r_star):
    """Evaluate both kernel estimates at ``r_star``.

    Both expansions use the position radii as centres.
    """
    r_star = np.asarray(r_star, dtype=float).ravel()
    phi_E = gram(theta_E, r_star, coeffs.r_x) @ coeffs.c_rx
    phi_A = gram(theta_A, r_star, coeffs.r_x) @ coeffs.c_rv
    return phi_E, phi_A


def check_equivalence(ds: TrajectoryDataset, hyper: Hyperparameters, r_grid) -> float:
    """Largest gap between the GP posterior mean and the ridge estimate.

    The penalty is matched to the noise level, ``lam = sigma^2 / (M N L)``,
    and both estimators see the same residual data.
    """
    if hyper.sigma <= 0:
        raise ValueError("equivalence needs sigma > 0")
    lam = hyper.sigma**2 / (ds.M * ds.N * ds.L)
    co = representer_coefficients(ds, hyper.theta_E, hyper.theta_A, lam, target=residual(ds, hyper))
    kE, kA = krr_estimate(co, hyper.theta_E, hyper.theta_A, r_grid)
    est = posterior_kernel(ds, hyper, r_grid)
    return float(max(np.max(np.abs(kE - est.mean_E)), np.max(np.abs(kA - est.mean_A))))
