"""Closed-form plane-wave scattering by a thin elastic spherical shell.

Time convention ``exp(-i omega t)``; the incident wave travels along +x and
``theta`` is measured from the +x axis. Series include the monopole term
``n = 0`` unless ``first_mode=1`` is requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class SeriesError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# special functions


def legendre_p(nmax: int, x) -> np.ndarray:
    """P_0..P_nmax at ``x``; shape (nmax + 1, *x.shape)."""
    x = np.asarray(x, dtype=float)
    out = np.empty((nmax + 1,) + x.shape)
    out[0] = 1.0
    if nmax >= 1:
        out[1] = x
    for n in range(1, nmax):
        out[n + 1] = ((2 * n + 1) * x * out[n] - n * out[n - 1]) / (n + 1)
    return out


def spherical_jn_all(nmax: int, x: float) -> np.ndarray:
    """j_0..j_nmax by downward (Miller) recurrence, normalised by the sum rule."""
    if x <= 0:
        raise ValueError("x must be positive")
    start = nmax + 20 + int(math.sqrt(40.0 * max(x, nmax)))
    start = max(start, int(x) + 20)
    j = np.zeros(start + 2)
    j[start] = 1.0
    for n in range(start, 0, -1):
        j[n - 1] = (2 * n + 1) / x * j[n] - j[n + 1]
        if abs(j[n - 1]) > 1e100:
            j[n - 1 :] *= 1e-100
    norm = math.sqrt(np.sum((2 * np.arange(start + 2) + 1) * j**2))
    j /= norm
    # fix the overall sign with j_0 = sin x / x (or j_1 when sin x ~ 0)
    j0 = math.sin(x) / x
    j1 = math.sin(x) / x**2 - math.cos(x) / x
    ref, val = (j0, j[0]) if abs(j0) > abs(j1) else (j1, j[1])
    if ref * val < 0:
        j = -j
    return j[: nmax + 1]


def spherical_yn_all(nmax: int, x: float) -> np.ndarray:
    """y_0..y_nmax by upward recurrence."""
    if x <= 0:
        raise ValueError("x must be positive")
    y = np.empty(nmax + 1)
    y[0] = -math.cos(x) / x
    if nmax >= 1:
        y[1] = -math.cos(x) / x**2 - math.sin(x) / x
    for n in range(1, nmax):
        y[n + 1] = (2 * n + 1) / x * y[n] - y[n - 1]
        if not math.isfinite(y[n + 1]):
            raise OverflowError(f"y_n overflow at n={n + 1}, x={x}")
    return y


def spherical_hankel1_all(nmax: int, x: float) -> np.ndarray:
    """h_n = j_n + i y_n for n = 0..nmax."""
    return spherical_jn_all(nmax, x) + 1j * spherical_yn_all(nmax, x)


def derivative_from_sequence(f: np.ndarray, x: float) -> np.ndarray:
    """f_n' = f_{n-1} - (n+1)/x f_n with f_0' = -f_1 (needs one extra order)."""
    n = np.arange(len(f) - 1)
    d = np.empty(len(f) - 1, dtype=f.dtype)
    d[0] = -f[1]
    d[1:] = f[:-2] - (n[1:] + 1) / x * f[1:-1]
    return d


def spherical_bessel_j(n: int, x: float, derivative: bool = False) -> float:
    j = spherical_jn_all(n + 1, x)
    return derivative_from_sequence(j, x)[n] if derivative else j[n]


def spherical_bessel_y(n: int, x: float, derivative: bool = False) -> float:
    y = spherical_yn_all(n + 1, x)
    return derivative_from_sequence(y, x)[n] if derivative else y[n]


def spherical_hankel1(n: int, x: float, derivative: bool = False) -> complex:
    h = spherical_hankel1_all(n + 1, x)
    return derivative_from_sequence(h, x)[n] if derivative else h[n]


# --------------------------------------------------------------------------
# shell parameters and modal quantities


def compressional_speed(mat) -> float:
    """Plate compressional wave speed sqrt(E / ((1 - nu^2) rho_s))."""
    return math.sqrt(mat.E / ((1.0 - mat.nu**2) * mat.rho_s))


@dataclass(frozen=True)
class SphereScatterParams:
    """Elastic sphere scattering problem (defaults: steel shell in water).

    ``a`` is the sphere diameter. With ``a_convention="diameter"`` the
    series use the physical radius ``a/2``; ``"literal"`` substitutes ``a``
    itself wherever the closed-form expressions contain the sphere size.
    """

    k: float
    a: float = 1.0
    h: float = 0.05
    rho_f: float = 1000.0
    c: float = 1482.0
    rho_s: float = 7860.0
    E: float = 210e9
    nu: float = 0.3
    p0: float = 1.0
    a_convention: str = "diameter"

    def __post_init__(self):
        for name in ("k", "a", "h", "rho_f", "c", "rho_s", "E", "p0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.a_convention not in ("diameter", "literal"):
            raise ValueError("a_convention must be 'diameter' or 'literal'")

    @property
    def R(self) -> float:
        """Length used in the closed-form expressions."""
        return 0.5 * self.a if self.a_convention == "diameter" else self.a

    @property
    def omega(self) -> float:
        return self.k * self.c

    @property
    def c_p(self) -> float:
        return compressional_speed(self)

    @property
    def Omega(self) -> float:
        return self.omega * self.R / self.c_p

    @property
    def beta2(self) -> float:
        return self.h**2 / (12.0 * self.R**2)

    def with_(self, **kw) -> "SphereScatterParams":
        return replace(self, **kw)


def _quartic_coefficients(n: int, nu: float, beta2: float):
    lam = n * (n + 1.0)
    b = 1 + 3 * nu + lam - beta2 * (1 - nu - lam**2 - nu * lam)
    c = (lam - 2) * (1 - nu**2) + beta2 * (lam**3 - 4 * lam**2 + lam * (5 - nu**2) - 2 * (1 - nu**2))
    return b, c


def natural_frequencies(n: int, params) -> tuple[float, float]:
    """Dimensionless natural frequencies (Omega_n^(1), Omega_n^(2)) of mode ``n``."""
    nu = params.nu
    beta2 = params.h**2 / (12.0 * params.R**2)
    b, c = _quartic_coefficients(n, nu, beta2)
    disc = b * b - 4 * c
    if disc < 0:
        raise ValueError(f"mode {n}: negative discriminant {disc}")
    q = 0.5 * (b + math.copysign(math.sqrt(disc), b))
    x1, x2 = q, (c / q if q != 0 else 0.0)
    lo, hi = sorted((x1, x2))
    if lo < -1e-14 * abs(hi):
        raise ValueError(f"mode {n}: negative squared frequency {lo} (unphysical parameters)")
    return math.sqrt(max(lo, 0.0)), math.sqrt(hi)


def modal_impedances(n: int, params: SphereScatterParams, hn=None, dhn=None) -> tuple[complex, complex]:
    """In-vacuo shell impedance Z_n and specific acoustic impedance z_n."""
    Om = params.Omega
    R = params.R
    b, c = _quartic_coefficients(n, params.nu, params.beta2)
    lam = n * (n + 1.0)
    num = Om**4 - b * Om**2 + c
    den = Om**2 - (1 + params.beta2) * (params.nu + lam - 1)
    if abs(den) < 1e-14 * max(Om**2, 1.0):
        raise SeriesError(f"mode {n}: driving frequency sits on a pole of Z_n")
    Z = -1j * params.rho_s * params.c_p / Om * (params.h / R) * num / den
    ka = params.k * R
    if hn is None:
        h = spherical_hankel1_all(n + 1, ka)
        hn, dhn = h[n], derivative_from_sequence(h, ka)[n]
    if abs(dhn) == 0:
        raise SeriesError(f"mode {n}: h_n'(ka) vanishes")
    z = 1j * params.rho_f * params.c * hn / dhn
    return Z, z


# --------------------------------------------------------------------------
# pressure series


def sphere_pressure(
    params: SphereScatterParams,
    r,
    theta,
    mode: str = "total",
    n_trunc: int | None = None,
    first_mode: int = 0,
    rtol: float = 1e-12,
):
    """Pressure at polar positions ``(r, theta)`` in the x-y plane.

    ``mode``: ``"scattered"`` (rigid scattered field), ``"rigid"`` (incident
    plus rigid scattered), ``"elastic"`` (radiated field of the shell
    vibration) or ``"total"`` (all three).
    """
    if mode not in ("scattered", "rigid", "elastic", "total"):
        raise ValueError(f"unknown mode {mode!r}")
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    r, theta = np.broadcast_arrays(r, theta)
    R = params.R
    if np.any(r < R * (1 - 1e-12)):
        raise ValueError("sample points must lie on or outside the sphere")
    k = params.k
    ka = k * R
    if n_trunc is None:
        n_trunc = int(math.ceil(ka)) + 40
    nmax = n_trunc

    jka = spherical_jn_all(nmax + 1, ka)
    hka = spherical_hankel1_all(nmax + 1, ka)
    djka = derivative_from_sequence(jka, ka)
    dhka = derivative_from_sequence(hka, ka)
    P = legendre_p(nmax, np.cos(theta))

    rs = np.unique(r)
    h_kr = {float(rv): spherical_hankel1_all(nmax, k * rv) for rv in rs}
    hr = np.empty((nmax + 1,) + r.shape, dtype=complex)
    for rv in rs:
        m = r == rv
        hr[:, m] = h_kr[float(rv)][:, None]

    want_scat = mode in ("scattered", "rigid", "total")
    want_ela = mode in ("elastic", "total")
    total = np.zeros(r.shape, dtype=complex)
    small = 0
    n_min = int(math.ceil(ka)) + 2
    for n in range(first_mode, nmax + 1):
        coef = 0.0j
        if want_scat:
            coef += -(1j**n) * (2 * n + 1) * djka[n] / dhka[n]
        if want_ela:
            Z, z = modal_impedances(n, params, hka[n], dhka[n])
            coef += (1j**n) * (2 * n + 1) * params.rho_f * params.c / ((Z + z) * (ka * dhka[n]) ** 2)
        term = params.p0 * coef * P[n] * hr[n]
        total += term
        scale = np.max(np.abs(total))
        if n >= n_min and np.max(np.abs(term)) <= rtol * max(scale, 1e-300):
            small += 1
            if small >= 3:
                break
        else:
            small = 0
    else:
        raise SeriesError(
            f"series not converged within {nmax} terms (last term {np.max(np.abs(term)):.3e})"
        )
    if mode in ("rigid", "total"):
        total += params.p0 * np.exp(1j * k * r * np.cos(theta))
    return total
