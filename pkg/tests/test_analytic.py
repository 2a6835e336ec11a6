from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import special

from loopfsi.analytic import (
    SeriesError,
    SphereScatterParams,
    compressional_speed,
    legendre_p,
    modal_impedances,
    natural_frequencies,
    spherical_bessel_j,
    spherical_bessel_y,
    spherical_hankel1,
    spherical_hankel1_all,
    spherical_jn_all,
    sphere_pressure,
)


@pytest.mark.parametrize("x", [0.3, 1.0, 7.0, 25.0, 60.0])
def test_bessel_sequences_match_scipy(x):
    n = np.arange(0, int(x) + 40)
    j = spherical_jn_all(n[-1], x)
    np.testing.assert_allclose(j, special.spherical_jn(n, x), rtol=1e-10, atol=1e-300)
    h = spherical_hankel1_all(int(x) + 5, x)
    m = np.arange(len(h))
    ref = special.spherical_jn(m, x) + 1j * special.spherical_yn(m, x)
    np.testing.assert_allclose(h, ref, rtol=1e-11)


def test_bessel_closed_forms():
    assert spherical_bessel_j(0, math.pi) == pytest.approx(0.0, abs=1e-15)
    assert spherical_hankel1(0, 1.0) == pytest.approx(-1j * np.exp(1j), abs=1e-14)


def test_wronskian():
    n, x = 5, 7.0
    w = spherical_bessel_j(n, x) * spherical_bessel_y(n, x, True) - spherical_bessel_j(n, x, True) * spherical_bessel_y(n, x)
    assert w == pytest.approx(1 / 49, rel=1e-12)


def test_derivatives_match_scipy():
    for n in (0, 1, 4, 12):
        assert spherical_bessel_j(n, 3.3, True) == pytest.approx(special.spherical_jn(n, 3.3, True), rel=1e-11)
        assert spherical_bessel_y(n, 3.3, True) == pytest.approx(special.spherical_yn(n, 3.3, True), rel=1e-11)


def test_legendre_matches_scipy():
    x = np.linspace(-1, 1, 11)
    P = legendre_p(30, x)
    for n in (0, 1, 7, 30):
        np.testing.assert_allclose(P[n], special.eval_legendre(n, x), atol=1e-13)


def test_hankel_requires_positive_argument():
    with pytest.raises(ValueError):
        spherical_jn_all(3, 0.0)


def test_compressional_speed():
    p = SphereScatterParams(k=1.0)
    assert compressional_speed(p) == pytest.approx(5418.48, abs=0.01)
    assert compressional_speed(p.with_(nu=0.0)) == pytest.approx(math.sqrt(210e9 / 7860))
    assert compressional_speed(p.with_(E=4 * 210e9)) == pytest.approx(2 * compressional_speed(p))


def test_membrane_rotation_mode_has_zero_frequency():
    p = SphereScatterParams(k=1.0, h=1e-9)
    lo, hi = natural_frequencies(1, p)
    assert lo == pytest.approx(0.0, abs=1e-8)
    assert hi > 1


@pytest.mark.parametrize("n", [2, 3, 5, 10])
def test_natural_frequencies_solve_the_quartic(n):
    p = SphereScatterParams(k=1.0)
    nu, b2, lam = p.nu, p.h**2 / (12 * p.R**2), n * (n + 1.0)
    # coefficients expanded independently of the implementation
    B = 1 + 3 * nu + lam - b2 * (1 - nu - lam**2 - nu * lam)
    C = (lam - 2) * (1 - nu**2) + b2 * (lam**3 - 4 * lam**2 + lam * (5 - nu**2) - 2 * (1 - nu**2))
    lo, hi = natural_frequencies(n, p)
    assert lo <= hi
    for w in (lo, hi):
        assert abs(w**4 - B * w**2 + C) <= 1e-10 * max(1.0, w**4)
    assert lo**2 * hi**2 == pytest.approx(C, rel=1e-10, abs=1e-14)
    assert lo**2 + hi**2 == pytest.approx(B, rel=1e-12)


def test_breathing_mode_quartic_has_negative_root():
    # for n = 0 the constant term is negative, so one root in Omega^2 is negative
    with pytest.raises(ValueError, match="mode 0"):
        natural_frequencies(0, SphereScatterParams(k=1.0))


def test_unphysical_parameters_raise():
    # a large negative Poisson ratio drives the n=0 constant term negative
    class Mat:
        nu, h, R = -0.99, 1e-9, 0.5

    with pytest.raises(ValueError):
        natural_frequencies(0, Mat())


def test_shell_impedance_vanishes_at_natural_frequency():
    p = SphereScatterParams(k=1.0)
    Om1 = natural_frequencies(3, p)[0]
    k = Om1 * p.c_p / (p.c * p.R)
    Z, _ = modal_impedances(3, p.with_(k=k))
    Z_off, _ = modal_impedances(3, p.with_(k=1.3 * k))
    assert abs(Z) <= 1e-9 * abs(Z_off)


def test_shell_impedance_pole_raises():
    p = SphereScatterParams(k=1.0)
    n, lam = 2, 6.0
    Om = math.sqrt((1 + p.beta2) * (p.nu + lam - 1))
    with pytest.raises(SeriesError, match="mode 2"):
        modal_impedances(n, p.with_(k=Om * p.c_p / (p.c * p.R)))


def test_acoustic_impedance_finite_and_plane_wave_limit():
    p = SphereScatterParams(k=20.0)  # ka = 10
    for n in range(51):
        _, z = modal_impedances(n, p)
        assert np.isfinite(z.real) and np.isfinite(z.imag)
    _, z0 = modal_impedances(0, SphereScatterParams(k=200.0))  # ka = 100
    assert abs(z0 - p.rho_f * p.c) <= 0.05 * p.rho_f * p.c


def test_rigid_limit_of_elastic_series():
    th = np.linspace(0, np.pi, 7)
    base = SphereScatterParams(k=20.0)
    rigid = sphere_pressure(base, 5.0, th, "rigid")
    # stiffening alone leaves the rigid-body translation (n = 1) of the massive shell
    prev = np.inf
    for E in (210e9, 210e11, 210e13, 210e15):
        ela = np.max(np.abs(sphere_pressure(base.with_(E=E), 5.0, th, "elastic")))
        assert ela < prev
        prev = ela
    stiff = base.with_(E=210e17)
    higher = sphere_pressure(stiff, 5.0, th, "elastic") - _mode_term(stiff, 1, th)
    assert np.max(np.abs(higher)) <= 1e-6
    # stiff and heavy: the shell no longer moves and the total field is rigid
    s = 1e10
    heavy = base.with_(E=210e9 * s, rho_s=7860.0 * s)
    assert np.max(np.abs(sphere_pressure(heavy, 5.0, th, "elastic"))) <= 1e-6
    np.testing.assert_allclose(sphere_pressure(heavy, 5.0, th, "total"), rigid, atol=1e-6)


def _mode_term(p, n, th):
    ka = p.k * p.R
    dh = special.spherical_jn(n, ka, True) + 1j * special.spherical_yn(n, ka, True)
    hr = special.spherical_jn(n, 5 * p.k) + 1j * special.spherical_yn(n, 5 * p.k)
    Z, z = modal_impedances(n, p)
    coef = 1j**n * (2 * n + 1) * p.rho_f * p.c / ((Z + z) * (ka * dh) ** 2)
    return coef * special.eval_legendre(n, np.cos(th)) * hr


def test_truncation_stability():
    p = SphereScatterParams(k=20.0)
    th = np.linspace(0, 2 * np.pi, 37)
    a = sphere_pressure(p, 5.0, th, "total", n_trunc=50)
    b = sphere_pressure(p, 5.0, th, "total", n_trunc=60)
    assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(b))


def test_non_convergence_reports_last_term():
    with pytest.raises(SeriesError, match="last term"):
        sphere_pressure(SphereScatterParams(k=20.0), 5.0, [0.3], "rigid", n_trunc=5)


def test_theta_symmetry():
    p = SphereScatterParams(k=20.0)
    th = np.linspace(0.1, 3.0, 9)
    np.testing.assert_allclose(sphere_pressure(p, 5.0, th), sphere_pressure(p, 5.0, -th), rtol=1e-13)


def test_rigid_series_against_direct_sum():
    # independent sum with scipy special functions, monopole included
    p = SphereScatterParams(k=12.0)
    ka, kr, th = p.k * p.R, p.k * 5.0, 0.7
    n = np.arange(60)
    dj = special.spherical_jn(n, ka, True)
    dh = dj + 1j * special.spherical_yn(n, ka, True)
    hr = special.spherical_jn(n, kr) + 1j * special.spherical_yn(n, kr)
    scat = np.sum(-(1j**n) * (2 * n + 1) * dj / dh * special.eval_legendre(n, math.cos(th)) * hr)
    ref = scat + np.exp(1j * kr * math.cos(th))
    assert sphere_pressure(p, 5.0, th, "rigid") == pytest.approx(ref, rel=1e-10)


def test_first_mode_flag_drops_monopole():
    p = SphereScatterParams(k=2.0)
    full = sphere_pressure(p, 5.0, 0.4, "scattered")
    no_mono = sphere_pressure(p, 5.0, 0.4, "scattered", first_mode=1)
    ka = p.k * p.R
    mono = -special.spherical_jn(0, ka, True) / (
        special.spherical_jn(0, ka, True) + 1j * special.spherical_yn(0, ka, True)
    ) * (special.spherical_jn(0, 10.0) + 1j * special.spherical_yn(0, 10.0))
    assert full - no_mono == pytest.approx(mono, rel=1e-10)


def test_inputs_validated():
    with pytest.raises(ValueError):
        SphereScatterParams(k=-1.0)
    with pytest.raises(ValueError):
        sphere_pressure(SphereScatterParams(k=1.0), 0.1, 0.0)
    with pytest.raises(ValueError):
        sphere_pressure(SphereScatterParams(k=1.0), 5.0, 0.0, mode="bogus")
