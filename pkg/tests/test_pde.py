import math

import numpy as np
import pytest

from ckdynamics import analytic as an
from ckdynamics import pde
from ckdynamics import trajectories as tr
from ckdynamics.core import Free, GaussianSpec, Grid, Harmonic, Linear, ModelParams, ValidationError, WaveField


def _l2(a, b, dx):
    return math.sqrt(float(np.sum(np.abs(a - b) ** 2)) * dx)


def _run(pot, g, p, t_end, dx=0.01, dt=1e-3, margin=8.0, **kw):
    grid = an.auto_grid(pot, g, p, t_end, dx, margin=margin)
    cfg = pde.SolverConfig(grid, dt, t_end, **kw)
    return pde.solve_scaled(cfg, p, pot, an.wavefunction(pot, g, p, grid, 0.0))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def test_config_validation():
    grid = Grid(-1, 1, 11)
    with pytest.raises(ValidationError):
        pde.SolverConfig(grid, 0.0, 1.0)
    with pytest.raises(ValidationError):
        pde.SolverConfig(grid, 0.3, 1.0)
    with pytest.raises(ValidationError):
        pde.SolverConfig(grid, 0.1, 1.0, scheme="rk4")
    with pytest.raises(ValidationError):
        pde.SolverConfig(grid, 0.1, 1.0, sample_times=(0.05,)).sample_steps()
    cfg = pde.SolverConfig(grid, 0.1, 1.0, sample_every=3)
    assert cfg.sample_steps() == [0, 3, 6, 9, 10]
    assert cfg.stability_ratio(ModelParams()) == pytest.approx(0.1 / 0.04)


def test_classical_limit_rejected(packet):
    grid = an.auto_grid(Free(), packet, ModelParams(), 1.0, 0.05)
    cfg = pde.SolverConfig(grid, 0.01, 0.1)
    f0 = WaveField(grid, packet.amplitude(grid.x, 1.0))
    with pytest.raises(pde.EpsilonZero):
        pde.solve_scaled(cfg, ModelParams(epsilon=0.0), Free(), f0)
    with pytest.raises(pde.EpsilonBelowFloor):
        pde.solve_transition(cfg, ModelParams(epsilon=1e-4), Free(), f0)


# --------------------------------------------------------------------------
# scaled linear equation
# --------------------------------------------------------------------------

def test_norm_conserved_per_step(packet):
    ev = _run(Linear(-0.5), packet, ModelParams(1, 1, 0.2, 0.5), 1.0, dx=0.02, dt=2e-3, scheme="cn4")
    assert ev.max_norm_drift < 1e-10
    assert all(abs(f.norm() - 1) < 1e-8 for f in ev)


def test_free_spreading_frictionless(packet):
    p = ModelParams(1, 1, 0.0, 1.0)
    ev = _run(Free(), packet, p, 4.0, scheme="cn4", sample_times=(1.0, 2.0, 4.0))
    for f in ev:
        assert f.width() == pytest.approx(math.sqrt(1 + f.t ** 2 / 4), abs=1e-5)


def test_harmonic_modulus_matches_closed_form(packet_at_rest):
    pot, p = Harmonic(0.5), ModelParams(1, 1, 0.1, 1.0)
    ev = _run(pot, packet_at_rest, p, 5.0, scheme="cn4", sample_times=(1.0, 2.0, 5.0))
    for f in ev:
        ref = an.wavefunction(pot, packet_at_rest, p, f.grid, f.t)
        assert _l2(np.abs(f.values), np.abs(ref.values), f.grid.dx) < 1e-4


@pytest.mark.slow
def test_ehrenfest_center_long_run(packet):
    p = ModelParams(1, 1, 0.1, 1.0)
    ev = _run(Free(), packet, p, 20.0, dx=0.02, dt=2e-3, scheme="cn4", sample_every=500)
    xt = an.classical_path(Free(), packet, p, ev.times).x
    assert np.max(np.abs([f.mean_position() for f in ev] - xt)) < 1e-4


def test_time_order_of_schemes(packet):
    # same grid, dt halved: cn is second order, the triple jump fourth order
    p = ModelParams(1, 1, 0.1, 1.0)
    grid = an.auto_grid(Free(), packet, p, 1.0, 0.01)
    psi0 = an.wavefunction(Free(), packet, p, grid, 0.0)
    ref = pde.solve_scaled(pde.SolverConfig(grid, 2.5e-4, 1.0, scheme="cn4", sample_times=(1.0,)), p, Free(), psi0)[-1]
    for scheme, lo in (("cn", 1.8), ("cn4", 3.5)):
        errs = []
        for dt in (0.02, 0.01):
            f = pde.solve_scaled(pde.SolverConfig(grid, dt, 1.0, scheme=scheme, sample_times=(1.0,)), p, Free(), psi0)[-1]
            errs.append(_l2(f.values, ref.values, grid.dx))
        assert math.log2(errs[0] / errs[1]) > lo


def test_numerov_beats_three_point(packet):
    p = ModelParams(1, 1, 0.0, 1.0)
    errs = {}
    for st in ("numerov", "three-point"):
        ev = _run(Free(), packet, p, 1.0, dx=0.02, dt=1e-3, scheme="cn4", stencil=st, sample_times=(1.0,))
        ref = an.wavefunction(Free(), packet, p, ev[-1].grid, 1.0)
        errs[st] = _l2(ev[-1].values, ref.values, ev[-1].grid.dx)
    assert errs["numerov"] < errs["three-point"] / 20


def test_damped_edges_absorb_outgoing_tail(packet):
    # narrow box: the packet hits the right edge
    p = ModelParams(1, 1, 0.0, 1.0)
    grid = Grid.from_spacing(-20.0, 0.0, 0.02)
    psi0 = an.wavefunction(Free(), packet, p, grid, 0.0)
    box = pde.solve_scaled(pde.SolverConfig(grid, 2e-3, 3.0, sample_times=(3.0,)), p, Free(), psi0)
    damp = pde.solve_scaled(pde.SolverConfig(grid, 2e-3, 3.0, boundary="damped-edges", sample_times=(3.0,)),
                            p, Free(), psi0)
    assert box[-1].norm() == pytest.approx(1.0, abs=1e-8)
    assert damp[-1].norm() < 0.9


def test_evolution_indexing(packet):
    ev = _run(Free(), packet, ModelParams(), 0.1, dx=0.05, dt=0.01, sample_times=(0.0, 0.05, 0.1))
    assert len(ev) == 3
    assert np.allclose(ev.times, [0, 0.05, 0.1])
    assert ev.at(0.05).t == pytest.approx(0.05)
    with pytest.raises(KeyError):
        ev.at(0.07)


# --------------------------------------------------------------------------
# transition equation
# --------------------------------------------------------------------------

def test_transition_at_unit_epsilon_is_scaled(packet):
    p = ModelParams(1, 1, 0.1, 1.0)
    grid = an.auto_grid(Free(), packet, p, 1.0, 0.02)
    psi0 = an.wavefunction(Free(), packet, p, grid, 0.0)
    cfg = pde.SolverConfig(grid, 2e-3, 1.0, scheme="cn4", sample_times=(0.5, 1.0))
    a = pde.solve_scaled(cfg, p, Free(), psi0)
    b = pde.solve_transition(cfg, p, Free(), pde.transition_initial(psi0, p))
    for fa, fb in zip(a, b):
        assert _l2(fa.values, fb.values, grid.dx) < 1e-12


def test_transition_intermediate_regime(packet):
    p = ModelParams(1, 1, 0.1, 0.5)
    grid = an.auto_grid(Free(), packet, p, 2.0, 0.02)
    psi0 = an.wavefunction(Free(), packet, p, grid, 0.0)
    cfg = pde.SolverConfig(grid, 2e-3, 2.0, scheme="cn4", sample_times=(1.0, 2.0))
    sc = pde.solve_scaled(cfg, p, Free(), psi0)
    te = pde.solve_transition(cfg, p, Free(), pde.transition_initial(psi0, p))
    assert max(te.iterations) <= 8
    mapped = pde.map_transition_series(te, p)
    for a, b, m in zip(sc, te, mapped):
        assert _l2(a.density, b.density, grid.dx) < 1e-4
        assert _l2(a.values, m.values, grid.dx) < 1e-3
        # transition phase divided by sqrt(eps) is the scaled phase up to a constant
        Sa = pde.polar_decompose(a, p).S / p.hbar_tilde
        Sb = pde.polar_decompose(b, p, planck=p.hbar).S / p.hbar / math.sqrt(p.epsilon)
        bulk = np.abs(a.values) > 1e-4
        d = (Sb - Sa)[bulk]
        assert np.max(np.abs(d - np.median(d))) < 1e-3


def test_nonlinear_divergence_reported(packet):
    p = ModelParams(1, 1, 0.1, 0.5)
    grid = an.auto_grid(Free(), packet, p, 0.1, 0.05)
    psi0 = pde.transition_initial(an.wavefunction(Free(), packet, p, grid, 0.0), p)
    cfg = pde.SolverConfig(grid, 0.05, 0.1, nonlinear_max_iter=1, nonlinear_tol=1e-14)
    with pytest.raises(pde.NonlinearDivergence):
        pde.solve_transition(cfg, p, Free(), psi0)


def test_map_properties(packet):
    p = ModelParams(1, 1, 0.1, 0.5)
    grid = an.auto_grid(Free(), packet, p, 0.0, 0.02)
    f = pde.transition_initial(an.wavefunction(Free(), packet, p, grid, 0.0), p)
    m = pde.map_transition_to_scaled(f, p)
    assert np.allclose(np.abs(m.values), np.abs(f.values), rtol=1e-14, atol=0)
    one = ModelParams(1, 1, 0.1, 1.0)
    assert np.array_equal(pde.map_transition_to_scaled(f, one).values, f.values)


# --------------------------------------------------------------------------
# polar fields
# --------------------------------------------------------------------------

def test_initial_phase_is_linear(packet):
    p = ModelParams(1, 1, 0.0, 0.7)
    grid = an.auto_grid(Free(), packet, p, 0.0, 0.01)
    pol = pde.polar_decompose(an.wavefunction(Free(), packet, p, grid, 0.0), p)
    sel = pol.R > 1e-4
    slope = np.diff(pol.S)[sel[1:] & sel[:-1]] / grid.dx
    assert np.max(np.abs(slope - packet.p0)) < 1e-10


def test_quantum_potential_of_gaussian():
    g = GaussianSpec(0.8, 0.5, 0.0)
    p = ModelParams(1.3, 1.0, 0.0, 0.6)
    grid = Grid.from_spacing(-8.0, 9.0, 0.005)
    pol = pde.polar_decompose(WaveField(grid, g.amplitude(grid.x, p.hbar_tilde)), p)
    # symbolic curvature of a Gaussian amplitude
    s = g.sigma0
    ref = p.hbar_tilde ** 2 / (2 * p.mass) * (1 / (2 * s * s) - (grid.x - g.x0) ** 2 / (4 * s ** 4))
    sel = np.abs(grid.x - g.x0) <= 3 * s
    assert np.max(np.abs(pol.Q - ref)[sel] / np.max(np.abs(ref[sel]))) < 1e-6


def test_constant_field_has_no_quantum_potential():
    grid = Grid(0.0, 1.0, 101)
    pol = pde.polar_decompose(WaveField(grid, np.full(101, 1 + 1j)), ModelParams())
    assert np.max(np.abs(pol.Q)) == 0.0


def test_unwrap_failure_on_unresolved_phase():
    grid = Grid(0.0, 1.0, 101)
    psi = np.exp(1j * 3.0 * np.arange(101))  # 3 rad per node
    with pytest.raises(pde.PhaseUnwrapFailure):
        pde.polar_decompose(WaveField(grid, psi), ModelParams())


# --------------------------------------------------------------------------
# residuals and Newton-law check
# --------------------------------------------------------------------------

def test_static_gaussian_has_zero_continuity_residual():
    g = GaussianSpec(1.0, 0.0, 0.0)
    p = ModelParams(1, 1, 0.0, 1.0)
    grid = Grid.from_spacing(-10.0, 10.0, 0.05)
    amp = g.amplitude(grid.x, 1.0)
    pols = [pde.polar_decompose(WaveField(grid, amp, t), p) for t in (0.0, 0.1, 0.2, 0.3, 0.4)]
    r = pde.equation_residuals(pols, p, Free())
    assert np.all(r.continuity == 0.0)


def test_residuals_need_regular_samples(packet):
    p = ModelParams()
    grid = an.auto_grid(Free(), packet, p, 1.0, 0.05)
    pols = [pde.analytic_polar_fields(Free(), packet, p, grid, t) for t in (0.0, 0.1, 0.3)]
    with pytest.raises(ValidationError):
        pde.equation_residuals(pols, p, Free())
    with pytest.raises(ValidationError):
        pde.equation_residuals(pols[:2], p, Free())


@pytest.mark.parametrize("pot", [Free(), Linear(-0.5)], ids=repr)
@pytest.mark.parametrize("eps", [0.0, 0.5, 1.0])
def test_closed_form_residuals_vanish_with_resolution(pot, eps, packet):
    p = ModelParams(1, 1, 0.1, eps)
    prev = None
    for dx, dt in ((0.04, 4e-3), (0.02, 2e-3)):
        grid = an.auto_grid(pot, packet, p, 1.2, dx, margin=12)
        pols = [pde.analytic_polar_fields(pot, packet, p, grid, 1.0 + k * dt) for k in range(-2, 3)]
        r = pde.equation_residuals(pols, p, pot)
        cur = r.continuity[0] + r.hamilton_jacobi[0]
        if prev is not None:
            assert math.log2(prev / cur) > 3.5
        prev = cur
    assert r.continuity[0] < 1e-6 and r.hamilton_jacobi[0] < 1e-6


def test_quantum_hj_differs_from_classical(packet):
    p = ModelParams(1, 1, 0.1, 1.0)
    grid = an.auto_grid(Free(), packet, p, 1.2, 0.02, margin=12)
    pols = [pde.analytic_polar_fields(Free(), packet, p, grid, 1.0 + k * 2e-3) for k in range(-2, 3)]
    r = pde.equation_residuals(pols, p, Free())
    assert r.classical_hj[0] > 1e3 * r.hamilton_jacobi[0]


def test_force_check_center_and_off_center(packet):
    p = ModelParams(1, 1, 0.1, 1.0)
    dt = 1e-3
    st = tuple(round(1.0 + k * dt, 12) for k in range(-2, 3))
    ev = _run(Free(), packet, p, 1.0 + 2 * dt, dx=0.01, dt=dt, margin=12, scheme="cn4", sample_times=st)
    pols = pde.polar_series(ev, p)
    ens = tr.closed_form_ensemble(Free(), packet, p, [packet.x0, packet.x0 + 1.5], np.array(st))
    fc = pde.bohmian_force_check(pols, p, Free(), ens.t, ens.x)
    assert fc.per_trajectory[0] < 1e-4
    assert fc.per_trajectory[1] < 1e-2


def test_force_check_classical_limit(packet):
    p = ModelParams(1, 1, 0.2, 0.0)
    grid = an.auto_grid(Linear(-0.5), packet, p, 3.0, 0.02)
    h = 1e-2
    ts = 2.0 + h * np.arange(-2, 3)
    pols = [pde.analytic_polar_fields(Linear(-0.5), packet, p, grid, t) for t in ts]
    ens = tr.closed_form_ensemble(Linear(-0.5), packet, p, [-12.0, -10.0, -7.0], ts)
    fc = pde.bohmian_force_check(pols, p, Linear(-0.5), ens.t, ens.x)
    assert fc.max_deviation < 1e-8


# --------------------------------------------------------------------------
# snapshots
# --------------------------------------------------------------------------

def test_snapshot_round_trip(tmp_path, packet):
    p = ModelParams(1, 1, 0.1, 0.5)
    ev = _run(Free(), packet, p, 0.2, dx=0.05, dt=0.01, sample_times=(0.0, 0.1, 0.2))
    path = pde.write_snapshots(tmp_path / "f.ckw", ev, p, extra={"note": "test"})
    raw = path.read_bytes()
    assert raw[:8] == b"CKWFSNAP"
    header, fields = pde.read_snapshots(path)
    assert header["params"] == p.to_dict() and header["extra"] == {"note": "test"}
    assert len(fields) == 3
    for a, b in zip(ev, fields):
        assert b.t == a.t and b.grid == a.grid
        assert np.max(np.abs(a.values - b.values)) < 1e-6
    (tmp_path / "bad.ckw").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValidationError):
        pde.read_snapshots(tmp_path / "bad.ckw")
