import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmech import identities as I
from stochmech.fields import (FIXED_ZERO, NONRELATIVISTIC, PERIODIC, RELATIVISTIC,
                              ComplexWaveField, PhysicalParams, gradient, make_grid,
                              polar_decompose)
from stochmech.kleingordon import KGProblem, kg_gaussian_packet, kg_plane_wave, solve_klein_gordon
from stochmech.report import make_report
from stochmech.scenarios import decaying_mass_fields
from stochmech.schrodinger import (SchrodingerProblem, analytic_box_eigenstate,
                                   analytic_free_gaussian, solve_schrodinger)
from stochmech.velocities import velocity_fields

P1 = PhysicalParams()


def _fs(wave, mode, params=P1, **kw):
    return velocity_fields(polar_decompose(wave, mode, params.hbar), params, mode, **kw)


def _by_id(reports):
    return {r.equation_id: r for r in reports}


# ----------------------------------------------------------------------
# shared fields


@pytest.fixture(scope="module")
def plane_wave():
    g = make_grid(0, 2 * np.pi, 128, 1e-3, 7, PERIODIC)
    k = 2.0
    w = P1.hbar * k ** 2 / (2 * P1.m)
    vals = np.exp(1j * (k * g.x[None] - w * g.t[:, None])) / np.sqrt(2 * np.pi)
    return _fs(ComplexWaveField(g, vals), NONRELATIVISTIC)


def _cn_gaussian(level, alpha=1.0):
    p = PhysicalParams(alpha=alpha)
    n_x = 128 * 2 ** level
    dt = 0.02 / 2 ** level
    g = make_grid(-10, 10, n_x, dt, int(round(0.5 / dt)) + 1, PERIODIC)
    psi0 = analytic_free_gaussian(0, 1, 1, p, g.with_time(dt, 1)).values[0]
    f = solve_schrodinger(SchrodingerProblem(g, p, psi0), window=5)
    return _fs(f, NONRELATIVISTIC, p)


@pytest.fixture(scope="module")
def cn_levels():
    return [_cn_gaussian(lv) for lv in range(3)]


@pytest.fixture(scope="module")
def kg_wave():
    g = make_grid(-25, 25, 800, 50 / 1600, 9, PERIODIC)
    return _fs(kg_plane_wave(2 * np.pi * 6 / 50, P1, g), RELATIVISTIC)


def _kg_packet_polar(level):
    n_x = 800 * 2 ** level
    dt = 0.5 * 50 / n_x
    n_t = int(round(2 / dt)) + 1
    g = make_grid(-25, 25, n_x, dt, n_t, PERIODIC)
    psi0, dpsi = kg_gaussian_packet(0.0, 3.0, 1.0, P1, g, 1)
    f = solve_klein_gordon(KGProblem(g, P1, psi0, dpsi))
    win = 8 * 2 ** level + 1
    w = ComplexWaveField(g.with_time(dt, win), f.values[-win:], (n_t - win) * dt)
    return polar_decompose(w, RELATIVISTIC, P1.hbar, 1e-3)


@pytest.fixture(scope="module")
def packet_polars():
    return [_kg_packet_polar(lv) for lv in range(3)]


@pytest.fixture(scope="module")
def packet_levels(packet_polars):
    return [velocity_fields(q, P1) for q in packet_polars]


# ----------------------------------------------------------------------
# exact fields


@pytest.mark.parametrize("eq", ["continuity", "hjb", "fokker_planck", "balance", "fick_first"])
def test_plane_wave_scalar_residuals_vanish(plane_wave, eq):
    rep = _by_id(I.full_report(plane_wave))[eq]
    assert rep.residual_max < 1e-10


@pytest.mark.parametrize("eq", ["nelson_osmotic", "nelson_current",
                                "rel_current_particle", "rel_current_antiparticle"])
def test_plane_wave_nelson_pair_vanishes(plane_wave, eq):
    assert _by_id(I.full_report(plane_wave))[eq].residual_max < 1e-8


def test_plane_wave_hjb_needs_the_dispersion(plane_wave):
    g = plane_wave.grid
    vals = np.exp(1j * (2.0 * g.x[None] - 2.5 * g.t[:, None]))
    rep = I.residual_hjb(_fs(ComplexWaveField(g, vals), NONRELATIVISTIC))
    # omega off the shell by 0.5 leaves exactly that much in dS/dt
    assert rep.residual_max == pytest.approx(0.5, rel=1e-9)


@pytest.mark.parametrize("eq", ["kg_continuity", "kg_hjb", "osmotic_hjb", "orthogonality",
                                "phase_wave", "density_transport", "orthogonality_product"])
def test_kg_plane_wave_residuals_vanish(kg_wave, eq):
    assert _by_id(I.full_report(kg_wave))[eq].residual_max < 1e-10


def test_kg_plane_wave_osmotic_continuity_both_sides_zero(kg_wave):
    for rep in I.residual_osmotic_continuity(kg_wave):
        assert rep.residual_max < 1e-10
    v = kg_wave.mask
    assert np.max(np.abs(kg_wave.osmotic[~v])) < 1e-10
    assert np.max(np.abs(kg_wave.osmotic0[~v])) < 1e-10


def test_kg_plane_wave_has_no_acceleration(kg_wave):
    assert I.residual_acceleration(kg_wave).residual_max < 1e-10


def test_box_hjb_is_limited_by_the_stencil():
    k = np.pi
    res = []
    for n_x in (1024, 2048, 4096):
        g = make_grid(0, 1, n_x, 1e-4, 7, FIXED_ZERO)
        rep = I.residual_hjb(_fs(analytic_box_eigenstate(1, 1.0, P1, g), NONRELATIVISTIC))
        assert rep.mask_fraction < 0.5
        res.append(rep.residual_l2)
        # the three-point second derivative of a sine is off by k^4 dx^2 / 12
        assert rep.residual_l2 < 1.2 * P1.hbar ** 2 / (2 * P1.m) * k ** 4 * g.dx ** 2 / 12
    assert I.fit_order([1 / 1024, 1 / 2048, 1 / 4096], res) == pytest.approx(2.0, abs=0.1)


def test_static_density_balances_drift_and_diffusion():
    g = make_grid(0, 1, 512, 1e-4, 7, FIXED_ZERO)
    p = PhysicalParams(alpha=1.0)
    fs = _fs(analytic_box_eigenstate(2, 1.0, p, g), NONRELATIVISTIC, p)
    assert I.residual_fokker_planck(fs).residual_max < 1e-10
    assert I.residual_balance(fs).residual_max < 1e-10


# ----------------------------------------------------------------------
# Schroedinger solver output


@pytest.mark.parametrize("eq", ["continuity", "hjb", "nelson_osmotic", "nelson_current",
                                "fokker_planck"])
def test_nonrelativistic_residuals_converge(cn_levels, eq):
    study = I.study_from_reports([I.full_report(fs, [eq])[0] for fs in cn_levels])
    assert study.monotone
    assert study.order == pytest.approx(2.0, abs=0.3)


def test_osmotic_equation_is_gradient_of_continuity(cn_levels):
    fs = cn_levels[1]
    rep = I.residual_nelson_pair(fs)[0]
    composed = fs.params.D * gradient(I.continuity_log_residual(fs), fs.grid)
    v = rep.valid
    assert np.max(np.abs(rep.residual - composed)[v]) < 1e-10


def test_fokker_planck_without_noise_is_continuity():
    fs = _cn_gaussian(0, alpha=0.0)
    fp = I.residual_fokker_planck(fs)
    ct = I.residual_continuity(fs)
    np.testing.assert_array_equal(fp.residual[fp.valid], ct.residual[ct.valid])
    assert fp.residual_l2 == ct.residual_l2


def test_density_noise_is_detected(cn_levels):
    fs = cn_levels[0]
    rng = np.random.default_rng(0)
    wave = ComplexWaveField(fs.grid, fs.polar.reconstruct()
                            * np.sqrt(1 + 0.01 * rng.standard_normal(fs.density.shape)))
    noisy = I.residual_continuity(_fs(wave, NONRELATIVISTIC))
    assert noisy.residual_max > 10 * I.residual_continuity(fs).residual_max


# ----------------------------------------------------------------------
# relativistic packet


@pytest.mark.parametrize("eq", ["kg_continuity", "kg_hjb", "osmotic_continuity",
                                "osmotic_hjb", "open_orthogonality"])
def test_packet_residuals_converge(packet_levels, eq):
    study = I.study_from_reports([I.full_report(fs, [eq])[0] for fs in packet_levels])
    assert study.order >= I.ORDER_BOUND


def test_limiting_case_separation(kg_wave, packet_levels):
    fs = packet_levels[0]
    assert I._q_ratio(kg_wave) < 1e-8
    assert I._q_ratio(fs) > 1e-2
    base = _by_id(I.full_report(kg_wave))
    pk = _by_id(I.full_report(fs))
    for eq in ("rel_current_particle", "rel_current_antiparticle"):
        assert base[eq].residual_max < 1e-10
        assert pk[eq].residual_max >= 10 * base[eq].residual_max
        assert any("limiting case" in n for n in pk[eq].notes)
        assert not base[eq].notes


def test_osmotic_split_matches_plain_form(packet_levels):
    plain, split = I.residual_osmotic_continuity(packet_levels[0])
    v = plain.valid & split.valid
    assert np.max(np.abs(plain.residual - split.residual)[v]) < 1e-12


@pytest.mark.parametrize("branch", [I.PARTICLE, I.ANTIPARTICLE])
@pytest.mark.parametrize("u_mode", [I.SPACELIKE, I.TIMELIKE])
def test_constant_masses_reduce_to_nelson_pair(packet_polars, branch, u_mode):
    fs = velocity_fields(packet_polars[0], P1, mass=P1.m)
    nel = I.residual_nelson_pair(fs, branch, u_mode)
    cyb = I.residual_cybernetic(fs, P1.m, P1.m, branch, u_mode)
    for a, b in zip(nel[:2], cyb[:2]):
        v = a.valid & b.valid
        assert np.max(np.abs(a.residual - b.residual)[v]) <= 1e-12


def test_rest_mass_gradient_form_matches_general_form(packet_polars):
    q = packet_polars[0]
    m = np.broadcast_to(np.exp(-0.1 * q.grid.x), q.R.shape).copy()
    fs = velocity_fields(q, P1, m_field=m, mass=P1.m)
    reps = _by_id(I.residual_cybernetic(fs, m, P1.m))
    a, b = reps["cyber_osmotic"], reps["cyber_osmotic_massgrad"]
    assert np.max(np.abs(a.residual - b.residual)[a.valid]) <= 1e-12


def test_decay_residual_self_converges(packet_polars):
    reps = []
    for q in packet_polars:
        dec = decaying_mass_fields(1.0, 0.1, 1.0, q, P1)
        reps.append(_by_id(dec.reports)["decay_osmotic"])
    assert I.self_study_from_reports(reps).order >= I.ORDER_BOUND


def test_open_orthogonality_on_decaying_mass(packet_polars):
    reps = [I.residual_orthogonality(decaying_mass_fields(1.0, 0.1, 1.0, q, P1).fields)[-1]
            for q in packet_polars]
    for r in reps:
        lhs = float(r.notes[-1].split("=")[1])
        assert lhs > 0.02
        assert r.residual_max < lhs
    assert I.study_from_reports(reps).order >= I.ORDER_BOUND


def test_corrupted_mass_breaks_acceleration(kg_wave):
    base = I.residual_acceleration(kg_wave)
    bad = kg_wave.mass * (1 + 0.05 * np.sin(kg_wave.grid.x * 2 * np.pi / 50))
    assert I.residual_acceleration(kg_wave, bad).residual_max > 10 * max(base.residual_max, 1e-12)


def test_nonpositive_mass_rejected(kg_wave):
    with pytest.raises(ValueError):
        I.residual_cybernetic(kg_wave, m_field=-1.0)


def test_bad_branch_and_mode(kg_wave):
    with pytest.raises(ValueError):
        I.residual_nelson_pair(kg_wave, "both")
    with pytest.raises(ValueError):
        I.residual_orthogonality(kg_wave, "lightlike")


def test_relativistic_only_residuals(plane_wave):
    with pytest.raises(ValueError):
        I.residual_osmotic_continuity(plane_wave)


# ----------------------------------------------------------------------
# diffusion


@given(st.integers(0, 2 ** 32 - 1))
def test_fick_first_is_definitional(seed):
    g = make_grid(-5, 5, 128, 1e-3, 2, PERIODIC)
    rng = np.random.default_rng(seed)
    P = np.exp(-g.x ** 2) * (1 + 0.5 * rng.uniform(size=g.n_points))
    assert I.residual_fick(P, P1, g).residual_max < 1e-10


def test_constant_density_diffusion_residuals_zero():
    g = make_grid(0, 1, 64, 1e-4, 6, PERIODIC)
    assert I.residual_fick(np.ones(g.n_points), P1, g).residual_max == 0.0
    hist, _ = I.heat_evolve(np.ones(g.n_points), P1, g)
    assert I.residual_fick_second(hist, P1, g).residual_max == 0.0


def _heat(n_x):
    g = make_grid(-2, 2, n_x, 0.0, 2, FIXED_ZERO)
    dt = g.dx ** 2 / 3
    g = g.with_time(dt, int(round(0.05 / dt)) + 1)
    P0 = I.heat_kernel_gaussian(g.x, 0.0, 0.0, 0.25, P1.D)
    hist, times = I.heat_evolve(P0, P1, g)
    return g, hist, times


def test_heat_evolution_matches_kernel():
    g, hist, times = _heat(512)
    exact = I.heat_kernel_gaussian(g.x, times[-1], 0.0, 0.25, P1.D)
    assert np.max(np.abs(hist[-1] - exact)) < 1e-4


def test_fick_second_converges():
    reps = []
    for n_x in (128, 256, 512):
        g, hist, _ = _heat(n_x)
        reps.append(I.residual_fick_second(hist, P1, g))
    assert I.study_from_reports(reps).order >= I.ORDER_BOUND


def test_unstable_heat_step_rejected():
    g = make_grid(0, 1, 64, 1.0, 3, FIXED_ZERO)
    with pytest.raises(ValueError, match="unstable"):
        I.heat_evolve(np.ones(g.n_points), P1, g)


# ----------------------------------------------------------------------
# reports and convergence plumbing


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40),
       st.lists(st.booleans(), min_size=4, max_size=40))
def test_report_invariants(values, flags):
    n = min(len(values), len(flags))
    r = np.array(values[:n])[None, :]
    valid = np.array(flags[:n])[None, :]
    g = make_grid(0, 1, 16, 1e-3, 2, PERIODIC)
    rep = make_report("continuity", r, valid, g, {"convention": NONRELATIVISTIC})
    assert 0.0 <= rep.mask_fraction <= 1.0
    assert rep.unreliable == (rep.mask_fraction >= 0.5)
    if valid.any():
        assert rep.residual_max >= 0 and rep.residual_l2 >= 0
        assert rep.residual_l2 <= rep.residual_max + 1e-12
    json.dumps(rep.to_dict())


@given(st.floats(0.5, 4.0), st.floats(1e-3, 1e3))
def test_fit_order_recovers_power_law(p, C):
    dx = 0.1 / 2 ** np.arange(4)
    assert I.fit_order(dx, C * dx ** p) == pytest.approx(p, abs=1e-9)


class _Fake:
    def __init__(self, dx, err):
        self.grid_summary = {"dx": dx, "dt": 0.0}
        self.residual_l2 = err
        self.equation_id = "continuity"
        self.convergence_order = None
        self.flags = []


def test_convergence_study_synthetic():
    res = I.convergence_study(lambda r: r, lambda lv: _Fake(0.1 / 2 ** lv, 3.0 * (0.1 / 2 ** lv) ** 2), 4)
    assert res.order == pytest.approx(2.0, abs=1e-9)
    assert res.reports[-1].convergence_order == res.order
    json.dumps(res.to_dict())


def test_floor_is_indeterminate():
    res = I.convergence_study(lambda r: r, lambda lv: _Fake(0.1 / 2 ** lv, 1e-15), 3)
    assert res.indeterminate and res.order is None


def test_non_monotone_flagged():
    errs = [1e-2, 2e-2, 1e-3]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = I.convergence_study(lambda r: r, lambda lv: _Fake(0.1 / 2 ** lv, errs[lv]), 3)
    assert not res.monotone
    assert any("non-monotone" in f for f in res.flags)
    assert any(issubclass(x.category, RuntimeWarning) for x in w)


def test_two_levels_rejected():
    with pytest.raises(ValueError, match="at least 3"):
        I.convergence_study(lambda r: r, lambda lv: _Fake(0.1, 0.1), 2)


def test_full_report_contents(kg_wave):
    ids = {r.equation_id for r in I.full_report(kg_wave)}
    for br in (I.PARTICLE, I.ANTIPARTICLE):
        assert f"rel_current_{br}" in ids and f"timelike_condition_{br}" in ids
    assert ids <= set(I.ALL_EQUATIONS)
    with pytest.raises(ValueError, match="unknown"):
        I.full_report(kg_wave, ["no_such_equation"])
    blob = json.dumps(I.reports_to_json(I.full_report(kg_wave, ["kg_hjb"])))
    assert "kg_hjb" in blob


def test_mode_tags_carry_conventions(kg_wave):
    reps = I.residual_nelson_pair(kg_wave, I.ANTIPARTICLE, I.TIMELIKE)
    assert reps[0].mode_tags["convention"] == RELATIVISTIC
    assert reps[-1].mode_tags["branch"] == I.ANTIPARTICLE
    assert reps[-1].mode_tags["u_mode"] == I.TIMELIKE
