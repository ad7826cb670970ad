"""Compiled scan loops. Batch-major inputs; states are laid out [B, L, D, N].

Time is the outer loop and the whole [D, N] state advances per step, so the
operands stream through memory contiguously. Every reduction still runs in a
fixed serial order. Hidden states are kept only when ``store`` is set.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def scan_fwd(u, a_bar, b_bar, c, d, store):
    nb, L, D = u.shape
    N = c.shape[2]
    y = np.empty((nb, L, D))
    hs = np.empty((nb, L, D, N)) if store else np.empty((0, 0, 0, 0))
    h = np.empty((D, N))
    for b in range(nb):
        h[:, :] = 0.0
        for t in range(L):
            for k in range(D):
                ut = u[b, t, k]
                acc = 0.0
                for n in range(N):
                    h[k, n] = a_bar[b, t, k, n] * h[k, n] + b_bar[b, t, k, n] * ut
                    acc += c[b, t, n] * h[k, n]
                y[b, t, k] = acc + d[k] * ut
            if store:
                hs[b, t] = h
    return y, hs


@njit(cache=True)
def scan_bwd(gy, u, a_bar, b_bar, c, d, hs):
    nb, L, D = u.shape
    N = c.shape[2]
    gu = np.zeros((nb, L, D))
    ga = np.zeros((nb, L, D, N))
    gb = np.zeros((nb, L, D, N))
    gc = np.zeros((nb, L, N))
    gd = np.zeros(D)
    carry = np.empty((D, N))
    for b in range(nb):
        carry[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for k in range(D):
                g = gy[b, t, k]
                ut = u[b, t, k]
                gd[k] += g * ut
                gut = g * d[k]
                for n in range(N):
                    gh = carry[k, n] + g * c[b, t, n]
                    gc[b, t, n] += g * hs[b, t, k, n]
                    hprev = hs[b, t - 1, k, n] if t > 0 else 0.0
                    ga[b, t, k, n] = gh * hprev
                    gb[b, t, k, n] = gh * ut
                    gut += gh * b_bar[b, t, k, n]
                    carry[k, n] = gh * a_bar[b, t, k, n]
                gu[b, t, k] = gut
    return gu, ga, gb, gc, gd


@njit(cache=True)
def fused_fwd(u, delta, A, Bm, Cm, Dv, store):
    nb, L, D = u.shape
    N = A.shape[1]
    y = np.empty((nb, L, D))
    hs = np.empty((nb, L, D, N)) if store else np.empty((0, 0, 0, 0))
    h = np.empty((D, N))
    for b in range(nb):
        h[:, :] = 0.0
        for t in range(L):
            for k in range(D):
                dt = delta[b, t, k]
                ut = u[b, t, k]
                acc = 0.0
                for n in range(N):
                    h[k, n] = math.exp(dt * A[k, n]) * h[k, n] + dt * Bm[b, t, n] * ut
                    acc += Cm[b, t, n] * h[k, n]
                y[b, t, k] = acc + Dv[k] * ut
            if store:
                hs[b, t] = h
    return y, hs


@njit(cache=True)
def fused_bwd(gy, u, delta, A, Bm, Cm, Dv, hs):
    nb, L, D = u.shape
    N = A.shape[1]
    gu = np.zeros((nb, L, D))
    gdelta = np.zeros((nb, L, D))
    gA = np.zeros((D, N))
    gB = np.zeros((nb, L, N))
    gC = np.zeros((nb, L, N))
    gD = np.zeros(D)
    carry = np.empty((D, N))
    for b in range(nb):
        carry[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for k in range(D):
                g = gy[b, t, k]
                dt = delta[b, t, k]
                ut = u[b, t, k]
                gD[k] += g * ut
                gut = g * Dv[k]
                gdt = 0.0
                for n in range(N):
                    gh = carry[k, n] + g * Cm[b, t, n]
                    gC[b, t, n] += g * hs[b, t, k, n]
                    a = math.exp(dt * A[k, n])
                    hprev = hs[b, t - 1, k, n] if t > 0 else 0.0
                    gda = gh * hprev * a
                    gdt += gda * A[k, n] + gh * Bm[b, t, n] * ut
                    gA[k, n] += gda * dt
                    gB[b, t, n] += gh * dt * ut
                    gut += gh * dt * Bm[b, t, n]
                    carry[k, n] = gh * a
                gdelta[b, t, k] = gdt
                gu[b, t, k] = gut
    return gu, gdelta, gA, gB, gC, gD
