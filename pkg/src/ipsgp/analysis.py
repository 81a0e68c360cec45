"""Evaluation tools: pair-distance measures, error metrics and trajectory UQ."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError
from .gp import Hyperparameters, KernelEstimate, posterior_kernel
from .systems import SystemSpec, Trajectory, TrajectoryDataset, pair_differences, simulate_many, zero_kernel

log = logging.getLogger(__name__)

SPEED_EPS = 1e-12


# ---------------------------------------------------------------------------
# Empirical pair-distance measures


@dataclass
class EmpiricalMeasure:
    """Histogram approximation of the weighted pair-distance measures.

    ``w_E`` and ``w_A`` are bin masses on ``edges``: every ordered pair
    ``i != j`` deposits ``|x_j - x_i|^2`` (resp. ``|v_j - v_i|^2``) into the
    bin of its position distance, normalized by ``N (N - 1)`` and by the
    number of sampled configurations.
    """

    edges: np.ndarray
    w_E: np.ndarray
    w_A: np.ndarray
    R: float
    n_samples: int

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def density(self, kind: str = "E") -> np.ndarray:
        w = self.w_E if kind == "E" else self.w_A
        return w / np.diff(self.edges)


def measure_from_states(X, V=None, n_bins: int = 1000, R: Optional[float] = None) -> EmpiricalMeasure:
    """Build the measure from configurations ``X`` (and ``V``) of shape ``(S, N, d)``.

    ``R`` defaults to the largest pair distance present.
    """
    X = np.asarray(X, dtype=float)
    X = X.reshape((-1,) + X.shape[-2:])
    S, N, _ = X.shape
    if N < 2:
        raise ValueError("need at least two agents")
    _, rx = pair_differences(X)
    off = ~np.eye(N, dtype=bool)
    rx = rx[:, off].ravel()
    wx = rx**2
    if V is None:
        wv = np.zeros_like(wx)
    else:
        V = np.asarray(V, dtype=float).reshape(X.shape)
        wv = pair_differences(V)[1][:, off].ravel() ** 2
    R = float(rx.max()) if R is None else float(R)
    if R <= 0:
        R = 1.0
    edges = np.linspace(0.0, R, n_bins + 1)
    idx = np.minimum((rx / R * n_bins).astype(int), n_bins - 1)
    keep = rx <= R
    norm = 1.0 / (N * (N - 1) * S)
    w_E = np.bincount(idx[keep], weights=wx[keep], minlength=n_bins) * norm
    w_A = np.bincount(idx[keep], weights=wv[keep], minlength=n_bins) * norm
    return EmpiricalMeasure(edges, w_E, w_A, R, S)


def empirical_rho(
    spec: SystemSpec,
    n_traj: int = 2000,
    n_bins: int = 1000,
    seed: int = 0,
    n_times: int = 21,
    batch: int = 250,
) -> EmpiricalMeasure:
    """Measure sampled from ``n_traj`` true trajectories on ``[0, T]``.

    Each trajectory is observed at ``n_times`` equidistant times.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    times = np.linspace(0.0, spec.T, n_times)
    seeds = np.random.SeedSequence(seed).spawn(n_traj)
    ics = np.stack([spec.sample_initial_state(np.random.default_rng(s)) for s in seeds])
    Xs, Vs = [], []
    dN = spec.dim
    for start in range(0, n_traj, batch):
        Y = simulate_many(spec, spec.phi_E, spec.phi_A, ics[start:start + batch], times)
        Xs.append(Y[..., :dN].reshape(-1, spec.N, spec.d))
        Vs.append(Y[..., dN:].reshape(-1, spec.N, spec.d))
    return measure_from_states(np.concatenate(Xs), np.concatenate(Vs), n_bins)


# ---------------------------------------------------------------------------
# Error metrics


def kernel_errors(estimate, truth: Callable, measure: EmpiricalMeasure, kind: str = "E") -> dict:
    """Sup-norm and weighted L2 errors of one estimated kernel.

    Parameters
    ----------
    estimate : KernelEstimate or (r, values)
        Posterior mean on a grid covering ``[0, R]``.
    truth : callable
        True kernel.
    kind : {"E", "A"}
        Which kernel of a ``KernelEstimate``, and which measure weights.

    Errors are relative to the truth unless it vanishes on the grid, in
    which case absolute values are returned (``relative`` tells which).
    """
    if isinstance(estimate, KernelEstimate):
        r = estimate.r
        vals = estimate.mean_E if kind == "E" else estimate.mean_A
    else:
        r, vals = (np.asarray(a, dtype=float) for a in estimate)
    inside = r <= measure.R * (1 + 1e-12)
    if not inside.any():
        raise ValueError("estimate grid does not meet [0, R]")
    tv = np.asarray(truth(r[inside]), dtype=float) * np.ones(inside.sum())
    diff = np.abs(vals[inside] - tv)
    tmax = np.max(np.abs(tv))
    relative = bool(tmax > 0)
    linf = float(diff.max() / tmax) if relative else float(diff.max())
    c = measure.centers
    w = measure.w_E if kind == "E" else measure.w_A
    est_c = np.interp(c, r, vals)
    tru_c = np.asarray(truth(c), dtype=float) * np.ones(c.size)
    num = float(np.sqrt(np.sum(w * (est_c - tru_c) ** 2)))
    den = float(np.sqrt(np.sum(w * tru_c**2)))
    l2 = num / den if relative and den > 0 else num
    return {"linf_rel": linf, "l2rho_rel": l2, "relative": relative}


def band_coverage(estimate: KernelEstimate, truth: Callable, R: float, kind: str = "A", k: float = 2.0) -> float:
    """Fraction of grid points in ``[0, R]`` where the truth lies within ``mean +- k std``."""
    mean = estimate.mean_E if kind == "E" else estimate.mean_A
    std = estimate.std_E if kind == "E" else estimate.std_A
    inside = estimate.r <= R
    tv = np.asarray(truth(estimate.r[inside]), dtype=float)
    ok = np.abs(tv - mean[inside]) <= k * std[inside]
    return float(ok.mean())


def trajectory_error(true_traj, pred_traj, interval=None, times=None) -> float:
    """Relative L2 discrepancy ``||true - pred|| / ||true||`` over snapshots.

    Inputs are :class:`Trajectory` objects or arrays with time on the first
    axis. ``interval = (t0, t1)`` restricts to snapshots inside it.
    """
    if isinstance(true_traj, Trajectory):
        times = true_traj.times if times is None else times
        a = true_traj.states
    else:
        a = np.asarray(true_traj, dtype=float)
    if isinstance(pred_traj, Trajectory):
        if times is not None and not np.allclose(pred_traj.times, times):
            raise ValueError("trajectories are sampled at different times")
        b = pred_traj.states
    else:
        b = np.asarray(pred_traj, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if interval is not None:
        if times is None:
            raise ValueError("interval needs snapshot times")
        t = np.asarray(times)
        sel = (t >= interval[0]) & (t <= interval[1])
        a, b = a[sel], b[sel]
    den = np.linalg.norm(a)
    if den == 0:
        raise ValueError("true trajectory has zero norm")
    return float(np.linalg.norm(a - b) / den)


@dataclass
class Polarisation:
    """Mean heading ``M(t)``, its norm and the per-time count of skipped agents."""

    M: np.ndarray
    magnitude: np.ndarray
    skipped: np.ndarray

    @property
    def any_skipped(self) -> bool:
        return bool(self.skipped.any())


def group_polarisation(velocities) -> Polarisation:
    """Average unit velocity of the group at every time.

    ``velocities`` has shape ``(L, N, d)``. Agents slower than ``1e-12``
    are left out of that time's average.
    """
    V = np.asarray(velocities, dtype=float)
    if V.ndim == 2:
        V = V[None]
    speed = np.linalg.norm(V, axis=-1)
    moving = speed >= SPEED_EPS
    count = moving.sum(axis=1)
    if np.any(count == 0):
        t = int(np.flatnonzero(count == 0)[0])
        raise ValueError(f"all agents are at rest at time index {t}")
    unit = np.where(moving[..., None], V / np.where(moving, speed, 1.0)[..., None], 0.0)
    M = unit.sum(axis=1) / count[:, None]
    return Polarisation(M, np.linalg.norm(M, axis=-1), V.shape[1] - count)


def wasserstein1(samples_a, samples_b) -> float:
    """Order-1 Wasserstein distance between two 1-D empirical distributions.

    Integrates ``|F_a - F_b|`` exactly between consecutive pooled samples.
    """
    a = np.sort(np.asarray(samples_a, dtype=float).ravel())
    b = np.sort(np.asarray(samples_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    pts = np.sort(np.concatenate([a, b]))
    gaps = np.diff(pts)
    Fa = np.searchsorted(a, pts[:-1], side="right") / a.size
    Fb = np.searchsorted(b, pts[:-1], side="right") / b.size
    return float(np.sum(np.abs(Fa - Fb) * gaps))


# ---------------------------------------------------------------------------
# Coercivity


def coercivity_check(phi_E, phi_A, spec: SystemSpec, n_mc: int = 10**6, seed: int = 0, batch: int = 20_000) -> dict:
    """Monte-Carlo check of ``||f_phi||^2 >= (N-1)/N^2 (||phi_E||^2 + ||phi_A||^2)``.

    Configurations are drawn i.i.d. from the initial distributions of
    ``spec``; ``n_mc`` counts ordered pairs, so ``n_mc / (N (N - 1))``
    configurations are used. Both sides come from the same sample and the
    standard error of the ratio follows from the delta method.
    """
    N, d = spec.N, spec.d
    if N < 2:
        raise ValueError("need at least two agents")
    S = max(2, int(np.ceil(n_mc / (N * (N - 1)))))
    rng = np.random.default_rng(seed)
    off = ~np.eye(N, dtype=bool)
    lhs = np.empty(S)
    rhs = np.empty(S)
    for s0 in range(0, S, batch):
        b = min(batch, S - s0)
        X = spec.ic_position.sample(rng, b * N, d).reshape(b, N, d)
        if spec.ic_velocity is None:
            V = np.zeros_like(X)
        else:
            V = spec.ic_velocity.sample(rng, b * N, d).reshape(b, N, d)
        dx, r = pair_differences(X)
        dv, rv = pair_differences(V)
        gE = np.where(off, np.asarray(phi_E(r), dtype=float) * np.ones_like(r), 0.0)
        gA = np.where(off, np.asarray(phi_A(r), dtype=float) * np.ones_like(r), 0.0)
        f = (np.einsum("bij,bijk->bik", gE, dx) + np.einsum("bij,bijk->bik", gA, dv)) / N
        lhs[s0:s0 + b] = np.sum(f**2, axis=(1, 2)) / N
        mass = gE**2 * r**2 + gA**2 * rv**2
        rhs[s0:s0 + b] = (N - 1) / N**2 * mass.sum(axis=(1, 2)) / (N * (N - 1))
    lm, rm = float(lhs.mean()), float(rhs.mean())
    if rm == 0:
        return {"lhs": lm, "rhs": rm, "ratio": float("nan") if lm == 0 else float("inf"), "se": 0.0, "n": S}
    ratio = lm / rm
    se = float(np.std(lhs - ratio * rhs, ddof=1) / (rm * np.sqrt(S)))
    return {"lhs": lm, "rhs": rm, "ratio": ratio, "se": se, "n": S}


# ---------------------------------------------------------------------------
# Monte-Carlo trajectory UQ


@dataclass
class UQEnsemble:
    """Per-time mean and standard deviation of sampled trajectories."""

    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_samples: int
    seed: int
    n_failed: int = 0


def _interp_kernel(r_grid, values):
    def phi(r):
        return np.interp(r, r_grid, values)

    return phi


def uq_ensemble(
    dataset: Optional[TrajectoryDataset],
    hyper: Hyperparameters,
    posterior: Optional[KernelEstimate],
    ic,
    times,
    n_samples: int,
    seed: int = 0,
    spec: Optional[SystemSpec] = None,
    r_grid=None,
) -> UQEnsemble:
    """Simulate ``ic`` under kernels drawn from the joint grid posterior.

    ``posterior`` must carry the joint covariance; when omitted it is
    computed from ``dataset`` on ``r_grid``. ``spec`` supplies the force
    family and dimensions; its ``alpha`` and mass are taken from ``hyper``.
    Samples whose integration fails are dropped and counted.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if spec is None:
        raise ValueError("a SystemSpec template is required for simulation")
    if posterior is None or posterior.cov is None:
        if dataset is None or r_grid is None:
            raise ValueError("need a posterior with covariance, or dataset and r_grid")
        posterior = posterior_kernel(dataset, hyper, r_grid, full_cov=True)
    g = posterior.r.size
    mean = np.concatenate([posterior.mean_E, posterior.mean_A])
    w, U = np.linalg.eigh(posterior.cov)
    root = U * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    draws = mean + rng.standard_normal((n_samples, 2 * g)) @ root.T
    first = hyper.mass == 0
    run_spec = spec.replace(force=hyper.force, alpha=tuple(np.atleast_1d(hyper.alpha)))
    ic = np.asarray(ic, dtype=float)
    out = []
    failed = 0
    for s in range(n_samples):
        phi_E = _interp_kernel(posterior.r, draws[s, :g])
        phi_A = zero_kernel if first else _interp_kernel(posterior.r, draws[s, g:])
        try:
            Y = simulate_many(run_spec, phi_E, phi_A, ic[None], times, alpha=hyper.alpha, mass=hyper.mass)
        except NumericalError as exc:
            log.warning("UQ sample %d dropped: %s", s, exc)
            failed += 1
            continue
        out.append(Y[0])
    if not out:
        raise NumericalError("every UQ sample failed to integrate")
    arr = np.stack(out)
    return UQEnsemble(np.asarray(times, dtype=float), arr.mean(axis=0), arr.std(axis=0), len(out), seed, failed)
