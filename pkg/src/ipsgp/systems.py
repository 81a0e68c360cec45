"""Interacting-particle systems: definitions, simulation and data generation.

Every agent obeys

    m x_i'' + c x_i' = F_i(x_i, x_i', alpha)
                      + (1/N) sum_k [phi_E(r_ik) (x_k - x_i) + phi_A(r_ik) (v_k - v_i)]

with ``r_ik = |x_k - x_i|``.  The linear damping ``c`` is zero for all
second-order systems; the first-order families carry ``c = 1`` so that
setting ``m = 0`` recovers ``x_i' = F_i + f_i``.

A state vector is laid out as ``[x_1 .. x_N | v_1 .. v_N]`` with the spatial
dimension innermost.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, NonFiniteError

Kernel = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Ground-truth kernels


def zero_kernel(r):
    return np.zeros_like(np.asarray(r, dtype=float))


def cs_alignment(r):
    r = np.asarray(r, dtype=float)
    return (1.0 + r * r) ** -0.25


def _morse(r):
    return (-np.exp(-2.0 * r) + np.exp(-0.25 * r)) / r


def _morse_prime(r):
    num = -np.exp(-2.0 * r) + np.exp(-0.25 * r)
    dnum = 2.0 * np.exp(-2.0 * r) - 0.25 * np.exp(-0.25 * r)
    return (dnum * r - num) / (r * r)


FM_CUTOFF = 0.05
# C^1 matching of a*exp(-b r) to the Morse-type kernel at the cutoff
FM_B = -_morse_prime(FM_CUTOFF) / _morse(FM_CUTOFF)
FM_A = _morse(FM_CUTOFF) * np.exp(FM_B * FM_CUTOFF)


def fm_energy(r):
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    small = r < FM_CUTOFF
    out[small] = FM_A * np.exp(-FM_B * r[small])
    big = ~small
    out[big] = _morse(r[big])
    return out


def ad_energy(r):
    r = np.asarray(r, dtype=float)
    return 0.1 / (1.0 + r) ** 2.5 + 1.0 / np.sqrt(1.0 + r)


def ad_alignment(r):
    r = np.asarray(r, dtype=float)
    return 0.1 / np.sqrt(1.0 + r * r)


def od_energy(r):
    r = np.asarray(r, dtype=float)
    return np.select(
        [r < 0.4, r < 0.6, r < 1.0],
        [25.0 * r, 10.0, 25.0 - 25.0 * r],
        default=0.0,
    )


# ---------------------------------------------------------------------------
# Specification types


@dataclass(frozen=True)
class Box:
    """Uniform distribution on ``[low, high]^d``, i.i.d. across agents."""

    low: float
    high: float

    def sample(self, rng: np.random.Generator, N: int, d: int) -> np.ndarray:
        if self.low == self.high:
            return np.full((N, d), float(self.low))
        return rng.uniform(self.low, self.high, size=(N, d))


FORCE_KINDS = ("none", "rayleigh", "drag", "stubborn")
_PARAM_NAMES = {
    "none": (),
    "rayleigh": ("kappa", "p"),
    "drag": ("gamma", "beta"),
    "stubborn": ("P", "kappa"),
}


@dataclass(frozen=True)
class ForceFamily:
    """Non-collective force ``F(x, v; alpha)`` plus a fixed linear damping.

    Parameters
    ----------
    kind : str
        ``none``; ``rayleigh`` with ``alpha = (kappa, p)`` giving
        ``kappa v (1 - |v|^p)``; ``drag`` with ``alpha = (gamma, beta)`` giving
        ``(gamma - beta |v|^2) v``; ``stubborn`` with ``alpha = (P, kappa)``
        giving ``-kappa (x_i - P)`` on the stubborn agents.
    damping : float
        Coefficient ``c`` of the ``c v`` term on the left-hand side.
    stubborn : tuple of int
        Agent indices affected by the stubborn force.
    """

    kind: str = "none"
    damping: float = 0.0
    stubborn: tuple = (0,)

    def __post_init__(self):
        if self.kind not in FORCE_KINDS:
            raise ValueError(f"unknown force family {self.kind!r}")

    @property
    def param_names(self) -> tuple:
        return _PARAM_NAMES[self.kind]

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def _check(self, alpha):
        alpha = np.asarray(alpha, dtype=float).ravel()
        if alpha.size != self.n_params:
            raise ValueError(
                f"force family {self.kind} takes {self.n_params} parameters, got {alpha.size}"
            )
        return alpha

    def force(self, X, V, alpha) -> np.ndarray:
        """Evaluate ``F`` on arrays of shape ``(..., N, d)``."""
        alpha = self._check(alpha)
        X = np.asarray(X, dtype=float)
        if self.kind == "none":
            return np.zeros_like(X)
        if self.kind == "stubborn":
            P, kappa = alpha
            out = np.zeros_like(X)
            idx = list(self.stubborn)
            out[..., idx, :] = -kappa * (X[..., idx, :] - P)
            return out
        V = np.asarray(V, dtype=float)
        speed = np.linalg.norm(V, axis=-1, keepdims=True)
        if self.kind == "rayleigh":
            kappa, p = alpha
            return kappa * V * (1.0 - _safe_pow(speed, p))
        gamma, beta = alpha
        return (gamma - beta * speed**2) * V

    def dforce(self, X, V, alpha) -> np.ndarray:
        """Partials of ``F`` w.r.t. each parameter, shape ``(n_params, ..., N, d)``."""
        alpha = self._check(alpha)
        X = np.asarray(X, dtype=float)
        if self.kind == "none":
            return np.zeros((0,) + X.shape)
        if self.kind == "stubborn":
            P, kappa = alpha
            out = np.zeros((2,) + X.shape)
            idx = list(self.stubborn)
            out[0][..., idx, :] = kappa
            out[1][..., idx, :] = -(X[..., idx, :] - P)
            return out
        V = np.asarray(V, dtype=float)
        speed = np.linalg.norm(V, axis=-1, keepdims=True)
        if self.kind == "rayleigh":
            kappa, p = alpha
            sp = _safe_pow(speed, p)
            logs = np.log(np.where(speed > 0, speed, 1.0))
            return np.stack([V * (1.0 - sp), -kappa * V * sp * logs])
        return np.stack([V, -(speed**2) * V])


def _safe_pow(s, p):
    # |v|^p with the convention 0^p = 0 (the factor multiplies v = 0 anyway)
    pos = s > 0
    return np.where(pos, np.where(pos, s, 1.0) ** p, 0.0)


@dataclass(frozen=True)
class SystemSpec:
    """Full description of one interacting-particle system."""

    name: str
    d: int
    N: int
    mass: float
    force: ForceFamily
    alpha: tuple
    phi_E: Kernel
    phi_A: Kernel
    ic_position: Box
    ic_velocity: Optional[Box]
    horizon: tuple

    def __post_init__(self):
        if self.d < 1 or self.N < 1:
            raise ValueError("d and N must be positive")
        if self.mass < 0:
            raise ValueError("mass must be nonnegative")
        if self.mass == 0 and self.phi_A is not zero_kernel:
            raise ValueError("a first-order system cannot carry an alignment kernel")
        if len(self.alpha) != self.force.n_params:
            raise ValueError("alpha does not match the force family")

    @property
    def first_order(self) -> bool:
        return self.mass == 0

    @property
    def T(self) -> float:
        return float(self.horizon[1])

    @property
    def dim(self) -> int:
        return self.d * self.N

    def replace(self, **kw) -> "SystemSpec":
        return replace(self, **kw)

    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        x0 = self.ic_position.sample(rng, self.N, self.d).ravel()
        if self.first_order:
            return x0
        v0 = self.ic_velocity.sample(rng, self.N, self.d).ravel()
        return np.concatenate([x0, v0])


def builtin_system(name: str) -> SystemSpec:
    """Return one of the reference systems ``CS``, ``FM``, ``AD``, ``OD``, ``ODS``."""
    key = str(name).upper()
    if key == "CS":
        return SystemSpec(
            "CS", 2, 10, 1.0, ForceFamily("rayleigh"), (1.0, 2.0),
            zero_kernel, cs_alignment, Box(-2.0, 2.0), Box(-1.0, 1.0), (0.0, 10.0, 20.0),
        )
    if key == "FM":
        return SystemSpec(
            "FM", 2, 10, 1.0, ForceFamily("drag"), (1.5, 0.5),
            fm_energy, zero_kernel, Box(-0.5, 0.5), Box(0.0, 0.0), (0.0, 5.0, 10.0),
        )
    if key == "AD":
        return SystemSpec(
            "AD", 2, 10, 1.0, ForceFamily("none"), (),
            ad_energy, ad_alignment, Box(0.0, 5.0), Box(0.0, 5.0), (0.0, 10.0, 20.0),
        )
    if key == "OD":
        return SystemSpec(
            "OD", 1, 5, 0.0, ForceFamily("none", damping=1.0), (),
            od_energy, zero_kernel, Box(-1.0, 1.0), None, (0.0, 2.0, 20.0),
        )
    if key == "ODS":
        return SystemSpec(
            "ODS", 1, 10, 0.0, ForceFamily("stubborn", damping=1.0, stubborn=(0,)), (1.0, 10.0),
            od_energy, zero_kernel, Box(-1.0, 1.0), None, (0.0, 2.0, 20.0),
        )
    raise ValueError(f"unknown system {name!r}; expected one of CS, FM, AD, OD, ODS")


BUILTIN_NAMES = ("CS", "FM", "AD", "OD", "ODS")


# ---------------------------------------------------------------------------
# Right-hand side


def pair_differences(X):
    """Return ``diff[..., i, k, :] = X[..., k, :] - X[..., i, :]`` and its norms."""
    diff = X[..., None, :, :] - X[..., :, None, :]
    return diff, np.linalg.norm(diff, axis=-1)


def _eval_kernel(phi, r, label):
    N = r.shape[-1]
    offdiag = ~np.eye(N, dtype=bool)
    with np.errstate(all="ignore"):
        vals = np.asarray(phi(r), dtype=float)
    vals = np.where(offdiag, vals, 0.0)
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        *lead, i, k = bad
        raise NonFiniteError(
            f"kernel {label} is not finite for pair (i={i}, k={k}) at r={r[tuple(bad)]!r}"
            + (f" in batch {tuple(lead)}" if lead else "")
        )
    return vals


def collective_force(X, V, phi_E, phi_A) -> np.ndarray:
    """Interaction term ``f_i`` for arrays of shape ``(..., N, d)``.

    ``V`` may be ``None`` when ``phi_A`` is the zero kernel.
    """
    X = np.asarray(X, dtype=float)
    N = X.shape[-2]
    diff, r = pair_differences(X)
    out = np.zeros_like(X)
    if phi_E is not zero_kernel:
        wE = _eval_kernel(phi_E, r, "phi_E")
        out += np.einsum("...ik,...ikd->...id", wE, diff)
    if phi_A is not zero_kernel:
        V = np.asarray(V, dtype=float)
        wA = _eval_kernel(phi_A, r, "phi_A")
        out += np.einsum("...ik,...ikd->...id", wA, V[..., None, :, :] - V[..., :, None, :])
    return out / N


def _split(state, N, d, first_order):
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise NonFiniteError("state contains non-finite entries")
    dN = N * d
    X = state[..., :dN].reshape(state.shape[:-1] + (N, d))
    if first_order or state.shape[-1] == dN:
        return X, None
    V = state[..., dN : 2 * dN].reshape(state.shape[:-1] + (N, d))
    return X, V


def _drive(spec, phi_E, phi_A, X, V, alpha, mass):
    """``(F + f - c v) / m`` for m > 0, or ``F + f`` for m = 0, shape (..., N, d)."""
    total = spec.force.force(X, V, alpha) + collective_force(X, V, phi_E, phi_A)
    if mass == 0:
        return total
    if spec.force.damping and V is not None:
        total = total - spec.force.damping * V
    return total / mass


def rhs(spec: SystemSpec, phi_E, phi_A, state, alpha=None, mass=None) -> np.ndarray:
    """Acceleration (or velocity when ``mass == 0``) of every agent.

    Parameters
    ----------
    spec : SystemSpec
    phi_E, phi_A : callable
        Vectorized kernels; pass :func:`zero_kernel` for an absent type.
    state : ndarray
        Length ``2dN`` state ``[X | V]``. For first-order systems the
        velocity half may be omitted.
    alpha, mass : optional
        Overrides for the spec's force parameters and mass.

    Returns
    -------
    ndarray
        Length ``dN`` vector with agent-major layout.
    """
    alpha = spec.alpha if alpha is None else alpha
    mass = spec.mass if mass is None else mass
    if mass == 0 and phi_A is not zero_kernel:
        raise ValueError("first-order evolution requires a zero alignment kernel")
    X, V = _split(state, spec.N, spec.d, mass == 0)
    out = _drive(spec, phi_E, phi_A, X, V, alpha, mass)
    return out.reshape(np.shape(state)[:-1] + (spec.dim,))


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class Trajectory:
    """States ``(L, 2dN)`` at the requested ``times``."""

    times: np.ndarray
    states: np.ndarray


def simulate_many(
    spec: SystemSpec,
    phi_E,
    phi_A,
    initial_states,
    times,
    rtol: float = 1e-5,
    atol: float = 1e-6,
    alpha=None,
    mass=None,
) -> np.ndarray:
    """Integrate several initial conditions as one stacked system.

    Returns an array of shape ``(B, L, 2dN)``. For first-order evolution the
    velocity half is filled with the right-hand side at each output time.
    """
    alpha = spec.alpha if alpha is None else alpha
    mass = spec.mass if mass is None else mass
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a nonempty 1-D array")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if not (rtol > 0 and atol > 0):
        raise ValueError("rtol and atol must be positive")
    first = mass == 0
    if first and phi_A is not zero_kernel:
        raise ValueError("first-order evolution requires a zero alignment kernel")
    N, d = spec.N, spec.d
    dN = N * d
    y0 = np.atleast_2d(np.asarray(initial_states, dtype=float))
    B = y0.shape[0]
    y0 = y0[:, :dN] if first else y0[:, : 2 * dN]
    width = y0.shape[1]

    def f(_t, y):
        y = y.reshape(B, width)
        if first:
            X = y.reshape(B, N, d)
            return _drive(spec, phi_E, phi_A, X, None, alpha, 0.0).ravel()
        X = y[:, :dN].reshape(B, N, d)
        V = y[:, dN:].reshape(B, N, d)
        acc = _drive(spec, phi_E, phi_A, X, V, alpha, mass)
        return np.concatenate([y[:, dN:], acc.reshape(B, dN)], axis=1).ravel()

    if times.size == 1:
        ys = y0[:, None, :]
    else:
        sol = solve_ivp(
            f, (times[0], times[-1]), y0.ravel(), method="RK45",
            t_eval=times, rtol=rtol, atol=atol,
        )
        if sol.status != 0:
            t_fail = float(sol.t[-1]) if sol.t.size else float(times[0])
            raise IntegrationError(f"integration failed at t={t_fail}: {sol.message}", t_fail)
        ys = sol.y.T.reshape(times.size, B, width).transpose(1, 0, 2)
    if first:
        X = ys.reshape(B, times.size, N, d)
        V = _drive(spec, phi_E, phi_A, X, None, alpha, 0.0)
        ys = np.concatenate([ys, V.reshape(B, times.size, dN)], axis=2)
    return ys


def simulate(spec, phi_E, phi_A, initial_state, times, rtol=1e-5, atol=1e-6, alpha=None, mass=None):
    """Integrate one trajectory and return the states at ``times``."""
    states = simulate_many(spec, phi_E, phi_A, np.asarray(initial_state)[None], times,
                           rtol=rtol, atol=atol, alpha=alpha, mass=mass)
    return Trajectory(np.asarray(times, dtype=float), states[0])


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class TrajectoryDataset:
    """Observed states ``Y`` of shape ``(M, L, 2dN)`` and accelerations ``Z`` ``(M, L, dN)``.

    ``observed`` optionally restricts which agents' equations enter the
    likelihood; interaction sums always run over all ``N`` agents.
    """

    d: int
    N: int
    M: int
    L: int
    times: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    noise_sigma: float = 0.0
    observed: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float).reshape(self.M, self.L, 2 * self.d * self.N)
        self.Z = np.asarray(self.Z, dtype=float).reshape(self.M, self.L, self.d * self.N)
        if self.times.shape != (self.L,):
            raise ValueError("times must have length L")
        if self.L > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("Y contains non-finite entries")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.observed is not None:
            obs = tuple(sorted(int(i) for i in self.observed))
            if not obs or obs[0] < 0 or obs[-1] >= self.N:
                raise ValueError("observed agent indices out of range")
            self.observed = obs

    @property
    def X(self) -> np.ndarray:
        """Positions, shape ``(M, L, N, d)``."""
        return self.Y[..., : self.d * self.N].reshape(self.M, self.L, self.N, self.d)

    @property
    def V(self) -> np.ndarray:
        return self.Y[..., self.d * self.N :].reshape(self.M, self.L, self.N, self.d)

    @property
    def A(self) -> np.ndarray:
        return self.Z.reshape(self.M, self.L, self.N, self.d)

    @property
    def agents(self) -> tuple:
        return tuple(range(self.N)) if self.observed is None else self.observed

    @property
    def n_obs(self) -> int:
        return self.d * len(self.agents) * self.M * self.L

    def with_observed(self, agents) -> "TrajectoryDataset":
        return replace(self, observed=None if agents is None else tuple(agents))

    def to_dict(self) -> dict:
        return {
            "d": int(self.d),
            "N": int(self.N),
            "M": int(self.M),
            "L": int(self.L),
            "times": [float(t) for t in self.times],
            "noise_sigma": float(self.noise_sigma),
            "Y": self.Y.tolist(),
            "Z": self.Z.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrajectoryDataset":
        return cls(
            d=int(obj["d"]), N=int(obj["N"]), M=int(obj["M"]), L=int(obj["L"]),
            times=np.asarray(obj["times"], dtype=float),
            Y=np.asarray(obj["Y"], dtype=float), Z=np.asarray(obj["Z"], dtype=float),
            noise_sigma=float(obj.get("noise_sigma", 0.0)),
        )


def save_dataset(ds: TrajectoryDataset, path) -> None:
    """Write the JSON dataset; floats use shortest round-trip representations."""
    with open(path, "w") as fh:
        json.dump(ds.to_dict(), fh, separators=(",", ":"))
        fh.write("\n")


def load_dataset(path) -> TrajectoryDataset:
    with open(path) as fh:
        return TrajectoryDataset.from_dict(json.load(fh))


def _first_order_acceleration(spec, phi_E, X, V, alpha):
    """Time derivative of ``g(X)`` along ``V = g(X)`` by a central difference."""
    vmax = np.max(np.abs(V), axis=(-2, -1), keepdims=True)
    h = np.where(vmax > 0, 1e-5 / np.where(vmax > 0, vmax, 1.0), 0.0)
    gp = _drive(spec, phi_E, zero_kernel, X + h * V, None, alpha, 0.0)
    gm = _drive(spec, phi_E, zero_kernel, X - h * V, None, alpha, 0.0)
    return np.where(h > 0, (gp - gm) / np.where(h > 0, 2 * h, 1.0), 0.0)


def generate_dataset(
    spec: SystemSpec, M: int, L: int, sigma: float = 0.0, seed: int = 0,
    rtol: float = 1e-5, atol: float = 1e-6,
) -> TrajectoryDataset:
    """Simulate ``M`` i.i.d. trajectories observed at ``L`` equidistant times on ``[0, T]``.

    ``Z`` holds the accelerations at the observed states plus i.i.d. Gaussian
    noise of standard deviation ``sigma``. For first-order systems the
    velocities are ``x' = F + f`` and ``Z`` is their time derivative.
    """
    if M < 1 or L < 1:
        raise ValueError("M and L must be at least 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    children = np.random.SeedSequence(seed).spawn(M + 1)
    times = np.linspace(0.0, spec.T, L) if L > 1 else np.zeros(1)
    N, d = spec.N, spec.d
    Y = np.empty((M, L, 2 * N * d))
    for m in range(M):
        x0 = spec.sample_initial_state(np.random.default_rng(children[m]))
        Y[m] = simulate(spec, spec.phi_E, spec.phi_A, x0, times).states
    X = Y[..., : N * d].reshape(M, L, N, d)
    V = Y[..., N * d :].reshape(M, L, N, d)
    if spec.first_order:
        acc = _first_order_acceleration(spec, spec.phi_E, X, V, spec.alpha)
    else:
        acc = _drive(spec, spec.phi_E, spec.phi_A, X, V, spec.alpha, spec.mass)
    Z = acc.reshape(M, L, N * d)
    if sigma > 0:
        Z = Z + sigma * np.random.default_rng(children[M]).standard_normal(Z.shape)
    return TrajectoryDataset(d, N, M, L, times, Y, Z, noise_sigma=float(sigma))


# ---------------------------------------------------------------------------
# Frame ingestion


def read_frames_csv(path, d: int) -> np.ndarray:
    """Read one frame per CSV row, columns ``x_1^(1..d), ..., x_N^(1..d)``.

    A non-numeric first row is treated as a header. Returns ``(F, N, d)``.
    """
    rows = []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if k == 0:
                    continue
                raise
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] % d:
        raise ValueError(f"column count is not a multiple of d={d}")
    return arr.reshape(arr.shape[0], arr.shape[1] // d, d)


def normalize_frames(positions) -> np.ndarray:
    """Min-max rescale each spatial coordinate into ``[0, 1]``."""
    pos = np.asarray(positions, dtype=float)
    lo = pos.min(axis=(0, 1), keepdims=True)
    span = pos.max(axis=(0, 1), keepdims=True) - lo
    return (pos - lo) / np.where(span > 0, span, 1.0)


def preprocess_frames(positions, window: int, dt: float) -> TrajectoryDataset:
    """Smooth position frames and difference them into a one-trajectory dataset.

    A centered moving average over ``window`` frames keeps
    ``F - window + 1`` frames; central differences then drop one frame at
    each end, leaving ``F - window - 1`` snapshots.

    Parameters
    ----------
    positions : array_like, shape (F, N, d)
    window : int
    dt : float
        Time between consecutive frames.
    """
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 3:
        raise ValueError("positions must have shape (frames, N, d)")
    if window < 1 or dt <= 0:
        raise ValueError("window must be >= 1 and dt > 0")
    F, N, d = pos.shape
    if F < window + 2:
        raise ValueError(f"need at least window + 2 = {window + 2} frames, got {F}")
    csum = np.cumsum(np.concatenate([np.zeros((1, N, d)), pos]), axis=0)
    smooth = (csum[window:] - csum[:-window]) / window
    x = smooth[1:-1]
    v = (smooth[2:] - smooth[:-2]) / (2.0 * dt)
    a = (smooth[2:] - 2.0 * smooth[1:-1] + smooth[:-2]) / (dt * dt)
    L = x.shape[0]
    Y = np.concatenate([x.reshape(L, N * d), v.reshape(L, N * d)], axis=1)
    times = dt * np.arange(L)
    return TrajectoryDataset(d, N, 1, L, times, Y[None], a.reshape(1, L, N * d), noise_sigma=0.0)


def stack_datasets(parts: Sequence[TrajectoryDataset]) -> TrajectoryDataset:
    """Concatenate datasets with equal ``(d, N, L, times)`` along trajectories."""
    first = parts[0]
    for p in parts[1:]:
        if (p.d, p.N, p.L) != (first.d, first.N, first.L) or not np.array_equal(p.times, first.times):
            raise ValueError("datasets are not compatible")
    return TrajectoryDataset(
        first.d, first.N, sum(p.M for p in parts), first.L, first.times,
        np.concatenate([p.Y for p in parts]), np.concatenate([p.Z for p in parts]),
        noise_sigma=first.noise_sigma,
    )
