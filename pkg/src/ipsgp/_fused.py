"""Fused loops for covariance assembly (compiled with numba when available)."""
from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

SQRT3 = math.sqrt(3.0)


def _kff_loop(r, RE, RA, useE, useA, nuE, wE, nuA, wA, with_grad, KE, KA, dKE, dKA):
    Q, N = r.shape
    d = RE.shape[2]
    share = nuE == nuA and wE == wA
    bE = np.zeros((d, d))
    bA = np.zeros((d, d))
    bdE = np.zeros((d, d))
    bdA = np.zeros((d, d))
    for p in range(Q):
        for q in range(p, Q):
            bE[:, :] = 0.0
            bA[:, :] = 0.0
            bdE[:, :] = 0.0
            bdA[:, :] = 0.0
            for k in range(N):
                rk = r[p, k]
                if rk == 0.0:
                    continue
                for kk in range(N):
                    rl = r[q, kk]
                    if rl == 0.0:
                        continue
                    u = abs(rk - rl)
                    if useE:
                        if nuE == 0.5:
                            ge = math.exp(-u / wE)
                            de = ge * u / (wE * wE)
                        else:
                            a = SQRT3 * u / wE
                            ex = math.exp(-a)
                            ge = (1.0 + a) * ex
                            de = a * a / wE * ex
                        for i in range(d):
                            xi = RE[p, k, i]
                            for j in range(d):
                                t = xi * RE[q, kk, j]
                                bE[i, j] += ge * t
                                if with_grad:
                                    bdE[i, j] += de * t
                    if useA:
                        if useE and share:
                            ga = ge
                            da = de
                        elif nuA == 0.5:
                            ga = math.exp(-u / wA)
                            da = ga * u / (wA * wA)
                        else:
                            a = SQRT3 * u / wA
                            ex = math.exp(-a)
                            ga = (1.0 + a) * ex
                            da = a * a / wA * ex
                        for i in range(d):
                            vi = RA[p, k, i]
                            for j in range(d):
                                t = vi * RA[q, kk, j]
                                bA[i, j] += ga * t
                                if with_grad:
                                    bdA[i, j] += da * t
            for i in range(d):
                for j in range(d):
                    if useE:
                        KE[p * d + i, q * d + j] = bE[i, j]
                        KE[q * d + j, p * d + i] = bE[i, j]
                        if with_grad:
                            dKE[p * d + i, q * d + j] = bdE[i, j]
                            dKE[q * d + j, p * d + i] = bdE[i, j]
                    if useA:
                        KA[p * d + i, q * d + j] = bA[i, j]
                        KA[q * d + j, p * d + i] = bA[i, j]
                        if with_grad:
                            dKA[p * d + i, q * d + j] = bdA[i, j]
                            dKA[q * d + j, p * d + i] = bdA[i, j]


if HAVE_NUMBA:
    kff_loop = njit(cache=True, fastmath=False)(_kff_loop)
else:  # pragma: no cover
    kff_loop = None
