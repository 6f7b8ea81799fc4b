import math

import numpy as np
import pytest
from scipy.integrate import quad, solve_ivp, trapezoid

from ckdynamics import analytic as an
from ckdynamics.core import Free, GaussianSpec, Grid, Harmonic, Linear, ModelParams, WaveField

POTENTIALS = [Free(), Linear(-0.5), Linear(0.3), Harmonic(0.5)]


def _packet_for(pot):
    if isinstance(pot, Harmonic):
        return GaussianSpec(1.0, 1.0, 0.3)
    return GaussianSpec(1.0, -10.0, 5.0)


def _newton_orbit(pot, g, params, t_end):
    """Classical equation of motion with friction, integrated by scipy."""
    m, gam = params.mass, params.gamma

    def rhs(t, y):
        return [y[1], -gam * y[1] - pot.gradient(y[0], m) / m]

    return solve_ivp(rhs, (0, t_end), [g.x0, g.p0 / m], rtol=1e-12, atol=1e-12, dense_output=True)


# --------------------------------------------------------------------------
# classical path
# --------------------------------------------------------------------------

@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
@pytest.mark.parametrize("gamma", [0.0, 0.1, 0.2])
def test_classical_path_solves_newton(pot, gamma):
    g = _packet_for(pot)
    p = ModelParams(1.3, 1.0, gamma, 1.0)
    sol = _newton_orbit(pot, g, p, 12.0)
    ts = np.linspace(0, 12, 61)
    path = an.classical_path(pot, g, p, ts)
    ref = sol.sol(ts)
    assert np.max(np.abs(path.x - ref[0])) < 1e-8
    assert np.max(np.abs(path.p - p.mass * ref[1])) < 1e-8


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
@pytest.mark.parametrize("gamma", [0.0, 0.15])
def test_action_is_lagrangian_integral(pot, gamma):
    g = _packet_for(pot)
    p = ModelParams(0.8, 1.0, gamma, 1.0)
    m = p.mass

    def lag(s):
        c = an.classical_path(pot, g, p, s)
        return (float(c.p) ** 2 / (2 * m) - pot.value(float(c.x), m)) * math.exp(gamma * s)

    for t in (0.5, 2.0, 4.5):
        ref = quad(lag, 0, t, epsabs=1e-13, epsrel=1e-13)[0]
        assert float(an.classical_path(pot, g, p, t).action) == pytest.approx(ref, rel=1e-9, abs=1e-10)
    c0 = an.classical_path(pot, g, p, 0.0)
    assert (float(c0.x), float(c0.p), float(c0.action)) == (g.x0, g.p0, 0.0)


def test_free_path_examples(packet):
    p = ModelParams(1, 1, 0.0, 1)
    ts = np.linspace(0, 7, 15)
    assert np.allclose(an.classical_path(Free(), packet, p, ts).x, -10 + 5 * ts, atol=1e-13)
    p = ModelParams(1, 1, 0.1, 1)
    assert float(an.classical_path(Free(), packet, p, 2.0).x) == pytest.approx(-10 + 50 * (1 - math.exp(-0.2)), abs=1e-12)
    assert float(an.classical_path(Free(), packet, p, 400.0).x) == pytest.approx(40.0, abs=1e-9)


def test_momentum_is_mass_times_velocity():
    pot, g = Harmonic(0.7), GaussianSpec(0.9, 1.0, 0.7)
    p = ModelParams(1.3, 1.0, 0.3, 0.6)
    h = 1e-5
    for t in (0.4, 3.0, 9.1):
        xp, xm = an.classical_path(pot, g, p, [t + h, t - h]).x
        assert float(an.classical_path(pot, g, p, t).p) == pytest.approx(p.mass * (xp - xm) / (2 * h), rel=1e-7)


# --------------------------------------------------------------------------
# widths
# --------------------------------------------------------------------------

@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
def test_initial_width(pot):
    g = _packet_for(pot)
    cw = an.complex_width(pot, g, ModelParams(1, 1, 0.1, 0.5), 0.0)
    assert complex(cw.s) == g.sigma0
    assert float(cw.sigma) == g.sigma0


def test_free_viscid_width_limit(packet):
    p = ModelParams(1, 1, 0.1, 1)
    cw = an.complex_width(Free(), packet, p, 500.0)
    assert complex(cw.s).imag == pytest.approx(5.0, abs=1e-12)
    assert float(cw.sigma) == pytest.approx(math.sqrt(26), abs=1e-12)


def test_harmonic_half_period_width():
    g = GaussianSpec(1.0, 1.0, 0.0)
    p = ModelParams(1, 1, 0.0, 1.0)
    w0 = 0.5
    assert float(an.complex_width(Harmonic(w0), g, p, math.pi / w0).sigma) == pytest.approx(1.0, abs=1e-12)


def test_harmonic_width_recurrence():
    g = GaussianSpec(0.8, 1.0, 0.2)
    p = ModelParams(1, 1, 0.0, 0.7)
    w0 = 0.6
    ts = np.linspace(0, 10, 41)
    s1 = an.complex_width(Harmonic(w0), g, p, ts).sigma
    s2 = an.complex_width(Harmonic(w0), g, p, ts + 2 * math.pi / w0).sigma
    assert np.allclose(s1, s2, rtol=1e-11)


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
def test_width_derivative_matches_finite_difference(pot):
    g = _packet_for(pot)
    p = ModelParams(1, 1, 0.2, 0.8)
    h = 1e-5
    for t in (0.7, 2.5, 6.0):
        s = an.complex_width(pot, g, p, [t - h, t + h]).sigma
        assert float(an.complex_width(pot, g, p, t).dsigma_dt) == pytest.approx((s[1] - s[0]) / (2 * h), rel=1e-6, abs=1e-9)


def test_momentum_width_examples(packet):
    # friction: every particle starts with the same velocity
    assert float(an.sigma_momentum(Free(), packet, ModelParams(1, 1, 0.1, 1), 0.0).Sigma) == 0.0
    assert float(an.sigma_momentum(Free(), packet, ModelParams(1, 1, 0.1, 1), 400.0).Sigma) < 1e-12
    for eps in (1.0, 0.5):
        p = ModelParams(1, 1, 0.0, eps)
        lim = math.sqrt(eps) / 2
        mw = an.sigma_momentum(Free(), packet, p, 1e4)
        assert float(mw.Sigma) == pytest.approx(lim, rel=1e-6)
        assert mw.sigma_p == pytest.approx(lim, rel=1e-15)


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
def test_widths_monotone_in_epsilon(pot):
    g = _packet_for(pot)
    ts = np.linspace(0.1, 8, 40)
    eps = [0.0, 0.25, 0.5, 0.75, 1.0]
    sig = np.array([an.complex_width(pot, g, ModelParams(1, 1, 0.1, e), ts).sigma for e in eps])
    Sig = np.array([an.sigma_momentum(pot, g, ModelParams(1, 1, 0.1, e), ts).Sigma for e in eps])
    assert np.all(np.diff(sig, axis=0) >= -1e-14)
    if isinstance(pot, Harmonic):
        # the oscillator's velocity spread is not ordered in epsilon near focal times
        assert np.min(np.diff(Sig, axis=0)) < 0
    else:
        assert np.all(np.diff(Sig, axis=0) >= -1e-14)


@pytest.mark.parametrize("pot", [Free(), Linear(-0.5)], ids=repr)
def test_width_product(pot, packet):
    p = ModelParams(1.4, 1.0, 0.15, 0.6)
    h = 1e-5
    for t in (0.5, 2.0, 7.0):
        sig = float(an.complex_width(pot, packet, p, t).sigma)
        Sig = float(an.sigma_momentum(pot, packet, p, t).Sigma)
        s2 = an.complex_width(pot, packet, p, [t - h, t + h]).sigma ** 2
        assert sig * Sig == pytest.approx(p.mass / 2 * (s2[1] - s2[0]) / (2 * h), rel=1e-6)


@pytest.mark.parametrize("pot", [Free(), Linear(-0.5)], ids=repr)
def test_auxiliary_functions_identically_one(pot, packet):
    aux = an.auxiliary_functions(pot, packet, ModelParams(1, 1, 0.1, 0.5), np.linspace(0, 10, 11))
    assert np.all(aux.g == 1.0) and np.all(aux.f == 1.0)


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
def test_small_gamma_matches_frictionless_branch(pot):
    g = _packet_for(pot)
    ts = np.linspace(0.1, 6, 25)
    p0, p1 = ModelParams(1, 1, 0.0, 0.7), ModelParams(1, 1, 1e-10, 0.7)
    for f in (lambda p: an.classical_path(pot, g, p, ts).x,
              lambda p: an.classical_path(pot, g, p, ts).p,
              lambda p: an.classical_path(pot, g, p, ts).action,
              lambda p: an.complex_width(pot, g, p, ts).sigma,
              lambda p: an.sigma_momentum(pot, g, p, ts).Sigma):
        a, b = f(p0), f(p1)
        assert np.allclose(a, b, rtol=1e-6, atol=1e-9)


def test_series_branch_is_continuous():
    g = GaussianSpec(1, -10, 5)
    # either side of the small-argument switch
    for gam in (0.4999e-6, 0.5001e-6, 1e-3):
        p = ModelParams(1, 1, gam, 1)
        t = 1.0
        z = gam * t
        u_ref = -math.expm1(-z) / gam
        assert float(an.damping_time(gam, t)) == pytest.approx(u_ref, rel=1e-14)
        x = float(an.classical_path(Free(), g, p, t).x)
        assert x == pytest.approx(-10 + 5 * u_ref, rel=1e-14)


# --------------------------------------------------------------------------
# oscillator coefficients
# --------------------------------------------------------------------------

def test_harmonic_coefficients_at_rest(packet_at_rest):
    p = ModelParams(1, 1, 0.1, 1.0)
    hc = an.harmonic_coefficients(Harmonic(0.5), packet_at_rest, p, 0.0)
    assert complex(hc.alpha) == pytest.approx(-0.25, abs=1e-15)
    assert float(hc.Theta) == 1.0
    assert hc.omega == pytest.approx(math.sqrt(0.25 - 0.0025))


@pytest.mark.parametrize("eps", [1.0, 0.5])
def test_theta_equals_width_ratio(packet_at_rest, eps):
    p = ModelParams(1, 1, 0.2, eps)
    ts = np.linspace(0, 30, 301)
    hc = an.harmonic_coefficients(Harmonic(0.6), packet_at_rest, p, ts)
    sig = an.complex_width(Harmonic(0.6), packet_at_rest, p, ts).sigma
    assert np.allclose(hc.Theta, sig / packet_at_rest.sigma0, rtol=1e-12)
    assert np.all(hc.Theta > 0)


def test_classical_theta_changes_sign(packet_at_rest):
    p = ModelParams(1, 1, 0.1, 0.0)
    Th = an.harmonic_coefficients(Harmonic(0.5), packet_at_rest, p, np.linspace(0, 10, 1001)).Theta
    assert Th.min() < 0 < Th.max()


# --------------------------------------------------------------------------
# wavefunction, current, velocity
# --------------------------------------------------------------------------

@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
def test_wavefunction_initial_condition(pot):
    g = _packet_for(pot)
    p = ModelParams(1, 1, 0.1, 0.5)
    x = np.linspace(g.x0 - 8, g.x0 + 8, 801)
    psi = an.wavefunction_values(pot, g, p, x, 0.0)
    assert np.max(np.abs(psi - g.amplitude(x, p.hbar_tilde))) < 1e-12


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
@pytest.mark.parametrize("t", [1.0, 4.0, 11.0])
def test_wavefunction_normalized(pot, t):
    g = _packet_for(pot)
    p = ModelParams(1, 1, 0.1, 0.8)
    grid = an.auto_grid(pot, g, p, t, 0.01)
    f = an.wavefunction(pot, g, p, grid, t)
    assert f.norm() == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
def test_ehrenfest_center(pot):
    g = _packet_for(pot)
    p = ModelParams(1, 1, 0.1, 1.0)
    for t in (0.0, 2.0, 6.0):
        grid = an.auto_grid(pot, g, p, t, 0.01)
        f = an.wavefunction(pot, g, p, grid, t)
        assert f.mean_position() == pytest.approx(float(an.classical_path(pot, g, p, t).x), abs=1e-8)


def test_free_viscid_value_against_direct_convolution(packet):
    # Oracle written out here: trapezoid rule on the free damped kernel.
    p = ModelParams(1, 1, 0.1, 1.0)
    t, x = 2.0, 0.0
    u = (1 - math.exp(-0.1 * t)) / 0.1
    xp = np.linspace(-30, 10, 400001)
    kern = np.sqrt(1 / (2j * math.pi * u)) * np.exp(1j * (x - xp) ** 2 / (2 * u))
    psi0 = (2 * math.pi) ** -0.25 * np.exp(-(xp + 10) ** 2 / 4 + 5j * (xp + 10))
    ref = trapezoid(kern * psi0, xp)
    val = complex(an.wavefunction_values(Free(), packet, p, x, t))
    assert abs(val - ref) / abs(ref) < 1e-6


def test_wavefunction_rejects_classical_limit(packet):
    with pytest.raises(an.EpsilonZero):
        an.wavefunction_values(Free(), packet, ModelParams(epsilon=0.0), 0.0, 1.0)


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
def test_current_at_center(pot):
    g = _packet_for(pot)
    p = ModelParams(1.2, 1, 0.1, 0.5)
    t = 3.0
    c = an.classical_path(pot, g, p, t)
    rho, j = an.density_and_current(pot, g, p, c.x, t)
    assert float(j) == pytest.approx(float(rho) * float(c.p) / p.mass, rel=1e-13)


def test_classical_free_current(packet):
    p = ModelParams(1, 1, 0.0, 0.0)
    x = np.linspace(-20, 20, 101)
    rho, j = an.density_and_current(Free(), packet, p, x, 1.5)
    assert np.allclose(j, 5.0 * rho, rtol=1e-14, atol=0)


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
def test_current_matches_field_current(pot):
    g = _packet_for(pot)
    p = ModelParams(1, 1, 0.2, 0.7)
    t = 2.0
    grid = an.auto_grid(pot, g, p, t, 0.002)
    f = an.wavefunction(pot, g, p, grid, t)
    rho_f, j_f = an.field_density_and_current(f, p)
    rho, j = an.density_and_current(pot, g, p, grid.x, t)
    assert np.max(np.abs(rho - rho_f)) < 1e-12
    # centred differences lose (k dx)^2 / 6 on a carrier of wavenumber k
    k = abs(float(an.classical_path(pot, g, p, t).p)) * math.exp(p.gamma * t) / p.hbar_tilde + 3.0
    assert np.max(np.abs(j - j_f)) < (k * grid.dx) ** 2 / 3 * np.max(np.abs(j)) + 1e-12


def test_continuity_of_closed_form_current():
    pot, g = Linear(-0.5), GaussianSpec(1, -10, 5)
    p = ModelParams(1, 1, 0.1, 1)
    x = np.linspace(-25, 10, 3501)
    dx = x[1] - x[0]
    prev = None
    for h in (0.02, 0.01):
        t = 2.0
        r_p, _ = an.density_and_current(pot, g, p, x, t + h)
        r_m, _ = an.density_and_current(pot, g, p, x, t - h)
        _, j = an.density_and_current(pot, g, p, x, t)
        res = (r_p - r_m) / (2 * h) + np.gradient(j, dx, edge_order=2)
        cur = np.sqrt(np.sum(res ** 2) * dx)
        if prev is not None:
            # dominated by the time stencil at this dx
            assert math.log2(prev / cur) > 1.9
        prev = cur


def test_velocity_field_examples(packet, packet_at_rest):
    p = ModelParams(1, 1, 0.1, 1)
    t = 2.5
    c = an.classical_path(Free(), packet, p, t)
    assert float(an.velocity_field(Free(), packet, p, c.x, t)) == pytest.approx(float(c.p))
    x = np.linspace(-4, 6, 21)
    assert np.allclose(an.velocity_field(Harmonic(0.5), packet_at_rest, p, x, 0.0), 0.0, atol=1e-15)
    pc = ModelParams(1, 1, 0.1, 0.0)
    for t in (0.0, 1.0, 5.0):
        assert np.allclose(an.velocity_field(Free(), packet, pc, x, t), 5 * math.exp(-0.1 * t), rtol=1e-14)


def test_quantum_potential_is_amplitude_curvature():
    pot, g = Free(), GaussianSpec(1, -10, 5)
    p = ModelParams(1, 1, 0.1, 0.6)
    t = 1.7
    x = np.linspace(-10, 5, 301)
    h = 1e-3
    R = lambda y: np.sqrt(an.density_and_current(pot, g, p, y, t)[0])
    curv = (R(x + h) - 2 * R(x) + R(x - h)) / h ** 2
    Q = -p.hbar_tilde ** 2 / (2 * p.mass) * curv / R(x)
    xt = float(an.classical_path(pot, g, p, t).x)
    sig = float(an.complex_width(pot, g, p, t).sigma)
    sel = np.abs(x - xt) < 3 * sig
    assert np.allclose(an.quantum_potential(pot, g, p, x, t)[sel], Q[sel], rtol=1e-5, atol=1e-8)


# --------------------------------------------------------------------------
# trajectories in closed form
# --------------------------------------------------------------------------

def test_center_stays_on_classical_path(packet):
    p = ModelParams(1, 1, 0.2, 0.5)
    ts = np.linspace(0, 10, 11)
    assert np.allclose(an.scaled_trajectory(Free(), packet, p, packet.x0, ts),
                       an.classical_path(Free(), packet, p, ts).x, rtol=0, atol=1e-14)


def test_classical_free_viscid_trajectory(packet):
    p = ModelParams(1, 1, 0.1, 0.0)
    ts = np.linspace(0, 30, 31)
    xi = -12.5
    assert np.allclose(an.scaled_trajectory(Free(), packet, p, xi, ts),
                       xi + 50 * (1 - np.exp(-0.1 * ts)), atol=1e-12)


def test_bohmian_free_trajectory(packet):
    p = ModelParams(1, 1, 0.0, 1.0)
    xt = float(an.classical_path(Free(), packet, p, 2.0).x)
    assert float(an.scaled_trajectory(Free(), packet, p, packet.x0 + 1, 2.0)) == pytest.approx(xt + math.sqrt(2), abs=1e-13)


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: repr(p))
@pytest.mark.parametrize("eps", [0.0, 0.5, 1.0])
def test_dressing_is_linear_in_offset(pot, eps):
    g = _packet_for(pot)
    p = ModelParams(1, 1, 0.1, eps)
    ts = np.linspace(0, 12, 25)
    seeds = g.x0 + np.array([-1.0, 0.5, 2.0])
    xt = an.classical_path(pot, g, p, ts).x
    d = np.array([an.scaled_trajectory(pot, g, p, s, ts) - xt for s in seeds])
    slope = d[0] / (seeds[0] - g.x0)
    for k in (1, 2):
        assert np.allclose(d[k], slope * (seeds[k] - g.x0), atol=1e-12)


def test_localization_points(packet):
    assert float(an.localization_point(packet, ModelParams(1, 1, 0.1, 0.0), -10.0)) == pytest.approx(40.0)
    assert float(an.localization_point(packet, ModelParams(1, 1, 0.1, 0.0), -12.0)) == pytest.approx(38.0)
    assert float(an.localization_point(packet, ModelParams(1, 1, 0.1, 1.0), -9.0)) == pytest.approx(40 + math.sqrt(26))
    with pytest.raises(an.RequiresFriction):
        an.localization_point(packet, ModelParams(1, 1, 0.0, 1.0), -9.0)


def test_trajectory_distance(packet):
    p = ModelParams(1, 1, 0.1, 1.0)
    assert float(an.trajectory_distance(packet, p, -9.0, -11.0, 0.0)) == 2.0
    assert float(an.trajectory_distance(packet, p, -9.0, -11.0, 800.0)) == pytest.approx(2 * math.sqrt(26))
    pc = ModelParams(1, 1, 0.1, 0.0)
    assert np.allclose(an.trajectory_distance(packet, pc, -9.0, -11.0, np.linspace(0, 50, 11)), 2.0, rtol=1e-15)


def test_asymptotes(packet):
    xi = np.array([-12.0, -10.0, -8.0])
    p = ModelParams(1, 1, 0.0, 1.0)
    assert np.all(np.isinf(an.asymptotic_position(Free(), packet, p, xi)))
    assert np.all(an.asymptotic_position(Linear(-0.5), packet, ModelParams(1, 1, 0.1, 1), xi) == np.inf)
    assert an.asymptotic_position(Harmonic(0.5), packet, p, xi) is None


# --------------------------------------------------------------------------
# momentum space
# --------------------------------------------------------------------------

@pytest.mark.parametrize("eps", [1.0, 0.3])
def test_momentum_transform_of_initial_packet(packet, eps):
    p = ModelParams(1, 1, 0.0, eps)
    ht = p.hbar_tilde
    grid = Grid.from_spacing(-60.0, 40.0, 0.01)
    f = WaveField(grid, packet.amplitude(grid.x, ht), 0.0)
    mf = an.momentum_transform(f, p)
    s0, x0, p0 = packet.sigma0, packet.x0, packet.p0
    ref = ((2 * s0 ** 2 / (math.pi * ht ** 2)) ** 0.25
           * np.exp(-s0 ** 2 * (mf.p - p0) ** 2 / ht ** 2 - 1j * mf.p * x0 / ht))
    assert np.max(np.abs(mf.values - ref)) < 1e-6
    assert mf.norm() == pytest.approx(f.norm(), rel=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 0.2])
def test_canonical_width_is_constant(packet, gamma):
    p = ModelParams(1, 1, gamma, 1.0)
    for t in (0.0, 2.0, 5.0):
        grid = an.auto_grid(Free(), packet, p, t, 0.01)
        mf = an.momentum_transform(an.wavefunction(Free(), packet, p, grid, t), p)
        assert mf.width() == pytest.approx(0.5, rel=1e-6)
        assert mf.mean() == pytest.approx(5.0, rel=1e-6)
    pp = np.linspace(3, 7, 9)
    dens = an.canonical_momentum_density(packet, p, pp)
    assert np.allclose(dens, np.exp(-2 * (pp - 5) ** 2) / math.sqrt(2 * math.pi * 0.25))


def test_auto_grid_covers_motion(packet):
    p = ModelParams(1, 1, 0.0, 1.0)
    grid = an.auto_grid(Free(), packet, p, 5.0, 0.05)
    for t in (0.0, 2.5, 5.0):
        assert an.outside_mass(Free(), packet, p, grid, t) < 1e-12
