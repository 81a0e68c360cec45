"""Matérn covariance functions on radii and their hyperparameter gradients.

Only the half-integer smoothness values 1/2 and 3/2 are supported; both
have closed forms that avoid Bessel functions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT3 = np.sqrt(3.0)
SUPPORTED_NU = (0.5, 1.5)


@dataclass(frozen=True)
class MaternParams:
    """Amplitude, length-scale and smoothness of a Matérn covariance.

    Parameters
    ----------
    s2 : float
        Amplitude (variance at zero lag). Zero switches the kernel type off.
    omega : float
        Length-scale, strictly positive.
    nu : float
        Smoothness, one of 0.5 or 1.5.
    """

    s2: float = 1.0
    omega: float = 1.0
    nu: float = 1.5

    def __post_init__(self):
        _check_nu(self.nu)
        if not self.s2 >= 0:
            raise ValueError(f"s2 must be nonnegative, got {self.s2}")
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")

    def replace(self, **kw) -> "MaternParams":
        vals = dict(s2=self.s2, omega=self.omega, nu=self.nu)
        vals.update(kw)
        return MaternParams(**vals)


def _check_nu(nu):
    if nu not in SUPPORTED_NU:
        raise ValueError(f"unsupported smoothness nu={nu}; use one of {SUPPORTED_NU}")


def matern_lag(params: MaternParams, u):
    """Covariance as a function of the lag ``u = |r - r'|``."""
    return params.s2 * unit_matern_lag(params, u)


def unit_matern_lag(params: MaternParams, u):
    """Unit-amplitude covariance at lag ``u``, which is also ``dK/ds2``."""
    u = np.asarray(u, dtype=float)
    if params.nu == 0.5:
        return np.exp(-u / params.omega)
    if params.nu == 1.5:
        a = SQRT3 * u / params.omega
        return (1.0 + a) * np.exp(-a)
    _check_nu(params.nu)


def matern_lag_with_domega(params: MaternParams, u):
    """Return ``(K, dK/domega)`` at lag ``u``, sharing one exponential."""
    u = np.asarray(u, dtype=float)
    w = params.omega
    if params.nu == 0.5:
        e = params.s2 * np.exp(-u / w)
        return e, e * (u / (w * w))
    if params.nu == 1.5:
        a = SQRT3 * u / w
        e = params.s2 * np.exp(-a)
        return (1.0 + a) * e, (a * a / w) * e
    _check_nu(params.nu)


def matern(params: MaternParams, r, rp):
    """Matérn covariance between radii ``r`` and ``rp`` (broadcasting)."""
    r = np.asarray(r, dtype=float)
    rp = np.asarray(rp, dtype=float)
    if np.any(r < 0) or np.any(rp < 0):
        raise ValueError("radii must be nonnegative")
    return matern_lag(params, np.abs(r - rp))


def matern_grad(params: MaternParams, r, rp):
    """Analytic partials ``(dK/ds2, dK/domega)`` of :func:`matern`."""
    r = np.asarray(r, dtype=float)
    rp = np.asarray(rp, dtype=float)
    if np.any(r < 0) or np.any(rp < 0):
        raise ValueError("radii must be nonnegative")
    u = np.abs(r - rp)
    _, dw = matern_lag_with_domega(params, u)
    return unit_matern_lag(params, u), dw


def gram(params: MaternParams, radii_a, radii_b=None):
    """Gram matrix ``G[i, j] = matern(params, a[i], b[j])``.

    When ``radii_b`` is omitted the matrix is built from ``radii_a`` on both
    sides and is exactly symmetric.
    """
    a = np.asarray(radii_a, dtype=float).ravel()
    if radii_b is None:
        if np.any(a < 0):
            raise ValueError("radii must be nonnegative")
        lag = np.abs(a[:, None] - a[None, :])
        return matern_lag(params, lag)
    b = np.asarray(radii_b, dtype=float).ravel()
    return matern(params, a[:, None], b[None, :])
