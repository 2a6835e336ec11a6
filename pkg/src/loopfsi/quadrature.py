"""Quadrature rules on the reference triangle {xi1, xi2 >= 0, xi1 + xi2 <= 1}.

All rules return ``(points (n, 2), weights (n,))`` with weights summing to
the reference area 1/2.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


@lru_cache(maxsize=None)
def gauss_legendre01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def strang_fix7():
    """Seven-point symmetric rule, exact for quintics."""
    r = np.sqrt(15.0)
    a1, b1 = (6 - r) / 21, (9 + 2 * r) / 21
    a2, b2 = (6 + r) / 21, (9 - 2 * r) / 21
    w1, w2 = (155 - r) / 2400, (155 + r) / 2400
    pts = np.array(
        [[1 / 3, 1 / 3], [a1, a1], [b1, a1], [a1, b1], [a2, a2], [b2, a2], [a2, b2]]
    )
    wts = np.array([9 / 80, w1, w1, w1, w2, w2, w2])
    return pts, wts


@lru_cache(maxsize=None)
def collapsed_gauss(n: int):
    """Collapsed tensor Gauss rule with n x n points, exact to degree 2n - 2."""
    x, w = gauss_legendre01(n)
    s, t = np.meshgrid(x, x, indexing="ij")
    ws = np.outer(w, w) * s
    pts = np.stack([(s * (1 - t)).ravel(), (s * t).ravel()], axis=1)
    return pts, ws.ravel()


def triangle_rule(order: int):
    """Rule exact at least to the given polynomial degree."""
    if order <= 5:
        return strang_fix7()
    return collapsed_gauss(order // 2 + 1)


def subdivided(rule, levels: int):
    """Apply ``rule`` on each of the 4**levels uniform sub-triangles."""
    pts, wts = rule
    tris = [CORNERS]
    for _ in range(levels):
        nxt = []
        for c in tris:
            m01, m12, m20 = (c[0] + c[1]) / 2, (c[1] + c[2]) / 2, (c[2] + c[0]) / 2
            nxt += [
                np.array([c[0], m01, m20]),
                np.array([m01, c[1], m12]),
                np.array([m20, m12, c[2]]),
                np.array([m01, m12, m20]),
            ]
        tris = nxt
    P, W = [], []
    for c in tris:
        J = np.stack([c[1] - c[0], c[2] - c[0]], axis=1)
        P.append(c[0] + pts @ J.T)
        W.append(wts * abs(np.linalg.det(J)))
    return np.concatenate(P), np.concatenate(W)


@lru_cache(maxsize=None)
def _polar_reference(n_radial: int, n_angular: int, grading: int):
    """Polar (Duffy) rule about corner (0, 0) of the reference triangle.

    The radial direction is split geometrically into ``grading`` layers
    towards the singular corner, each with its own Gauss rule.
    """
    xr, wr = gauss_legendre01(n_radial)
    xa, wa = gauss_legendre01(n_angular)
    if grading <= 0:
        edges = np.array([0.0, 1.0])
    else:
        edges = np.concatenate([[0.0], 0.5 ** np.arange(grading, -1, -1)])
    s_list, ws_list = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        s_list.append(lo + (hi - lo) * xr)
        ws_list.append((hi - lo) * wr)
    s = np.concatenate(s_list)
    ws = np.concatenate(ws_list)
    S, T = np.meshgrid(s, xa, indexing="ij")
    W = np.outer(ws, wa) * S
    pts = np.stack([(S * (1 - T)).ravel(), (S * T).ravel()], axis=1)
    return pts, W.ravel()


def polar_rule(corner: int, n_radial: int = 8, n_angular: int = 8, grading: int = 0):
    """Rule whose radial coordinate is anchored at reference corner ``corner``.

    The 1/r behaviour of weakly singular kernels at that corner is cancelled
    by the Jacobian of the collapsed map.
    """
    pts, wts = _polar_reference(n_radial, n_angular, grading)
    c = CORNERS[corner]
    a = CORNERS[(corner + 1) % 3]
    b = CORNERS[(corner + 2) % 3]
    J = np.stack([a - c, b - c], axis=1)
    return c + pts @ J.T, wts * abs(np.linalg.det(J))
