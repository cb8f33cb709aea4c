import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmech import identities as I
from stochmech.fields import FIXED_ZERO, PhysicalParams, make_grid
from stochmech.manifest import read_manifest
from stochmech.scenarios import (SCENARIOS, ConfigError, PowerLawWall, ScenarioError,
                                 available_quantities, box_osmotic_profile,
                                 compute_scenario, decaying_mass_fields, default_config,
                                 defaults_for, emit_plotdata, load_config,
                                 moving_wall_fields, parse_config, refine, run_scenario,
                                 scenario_convergence, strict_failures)
from stochmech.storage import sha256_file

P1 = PhysicalParams()


# ----------------------------------------------------------------------
# configuration


def test_every_scenario_has_valid_defaults():
    for name in SCENARIOS:
        cfg = default_config(name)
        assert cfg.name == name
        assert cfg.grid.n_t >= 2


def test_unknown_scenario():
    with pytest.raises(ConfigError, match="unknown scenario"):
        defaults_for("harmonic-oscillator")
    with pytest.raises(ConfigError):
        parse_config("scenario = nope\n")


def test_parse_without_section_header():
    cfg = parse_config("scenario = box-eigenstate\nn = 2\nL = 2.0\n")
    assert cfg["n"] == 2 and cfg.grid.x_max == 2.0


@pytest.mark.parametrize("text", [
    "scenario = box-eigenstate\nbogus = 1\n",
    "scenario = box-eigenstate\nn = two\n",
    "[scenario]\nscenario = box-eigenstate\n[other]\na = 1\n",
    "n = 2\n",
    "scenario = box-eigenstate\nn = 0\n",
    "scenario = kg-plane-wave\nk = 1.3\n",
    "scenario = fick-diffusion\ndt = 0.01\n",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.ini")


def test_ini_round_trip(tmp_path):
    for name in SCENARIOS:
        cfg = default_config(name, {"seed": 17})
        path = tmp_path / f"{name}.ini"
        path.write_text(cfg.to_ini())
        back = load_config(path)
        assert back.config_hash() == cfg.config_hash()
        assert back.canonical() == {k: v for k, v in cfg.canonical().items()}


def test_hash_ignores_execution_keys():
    a = default_config("free-gaussian")
    b = a.with_overrides({"workers": "8", "backend": "python"})
    c = a.with_overrides({"seed": "1"})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_overrides_are_parsed():
    cfg = default_config("free-gaussian").with_overrides({"n_x": "256", "dt": "auto"})
    assert cfg["n_x"] == 256
    assert cfg.grid.dt == pytest.approx(0.5 * cfg.grid.dx)


def test_refine_keeps_the_time_span():
    cfg = default_config("kg-packet")
    for lv in range(3):
        sub = refine(cfg, lv)
        g = sub.grid
        assert g.n_x == cfg["n_x"] * 2 ** lv
        assert (g.n_t - 1) * g.dt == pytest.approx((cfg.grid.n_t - 1) * cfg.grid.dt)
        assert (sub["window"] - 1) * g.dt == pytest.approx((cfg["window"] - 1) * cfg.grid.dt)


# ----------------------------------------------------------------------
# box profile


def test_box_profile_examples():
    g = make_grid(0, 1, 16, 1e-3, 2, FIXED_ZERO)
    prof = box_osmotic_profile(1, 1.0, P1, g)
    assert g.x[4] == 0.25 and g.x[8] == 0.5
    assert prof.u[4] == pytest.approx(np.pi, rel=1e-12)
    assert abs(prof.u[8]) < 1e-12
    assert prof.mask[0] and prof.mask[-1]


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("L", [1.0, 2.0])
def test_box_profile_matches_cotangent(n, L):
    g = make_grid(0, L, 4096, 1e-3, 2, FIXED_ZERO)
    prof = box_osmotic_profile(n, L, P1, g)
    v = P1.hbar * n * np.pi / (L * P1.m)
    good = ~prof.mask
    theta = n * np.pi * g.x[good] / L
    np.testing.assert_allclose(prof.u[good], v * np.cos(theta) / np.sin(theta), rtol=1e-12)
    assert np.all(np.abs(np.sin(theta)) >= 0.1)
    assert prof.max_relative_deviation(v) < 1e-6


def test_box_profile_stencil_order():
    errs, dxs = [], []
    for n_x in (1024, 2048, 4096):
        g = make_grid(0, 1, n_x, 1e-3, 2, FIXED_ZERO)
        prof = box_osmotic_profile(2, 1.0, P1, g)
        good = ~prof.mask
        errs.append(np.max(np.abs(prof.grad_log_P_stencil - prof.grad_log_P)[good]))
        dxs.append(g.dx)
    assert I.fit_order(dxs, errs) == pytest.approx(2.0, abs=0.1)


def test_box_profile_bad_input():
    g = make_grid(0, 1, 64, 1e-3, 2, FIXED_ZERO)
    with pytest.raises(ValueError):
        box_osmotic_profile(0, 1.0, P1, g)
    with pytest.raises(ValueError, match="span"):
        box_osmotic_profile(1, 2.0, P1, g)


# ----------------------------------------------------------------------
# moving wall


@pytest.mark.parametrize("n", [1, 2])
def test_static_wall_reduces_to_box(n):
    g = make_grid(0, 1, 512, 1e-3, 2, FIXED_ZERO)
    box = box_osmotic_profile(n, 1.0, P1, g)
    wall = moving_wall_fields(n, PowerLawWall(1.0, 0.5, 0.0), P1, g)
    for name in ("P", "grad_log_P", "grad_log_P_stencil", "u", "u_stencil"):
        np.testing.assert_array_equal(getattr(wall, name), getattr(box, name))
    assert np.all(wall.u_D == 0)


def test_default_moving_wall_follows_mass_gradient():
    res = compute_scenario(default_config("moving-wall-box"))
    s = res.summary
    assert s["max_relative_u_minus_uD"] < 0.05
    assert s["max_abs_u_over_c"] < 1.0
    prof = res.tables["profile"]
    i = np.argmin(np.abs(prof.x - 100.0))
    # dL/dx / L = 0.01 at the reference point
    assert prof.u_D[i] == pytest.approx(-P1.D * 0.01, rel=1e-12)
    # m'/m = -L'/L
    gm = np.gradient(np.log(prof.m_field), prof.x)
    np.testing.assert_allclose(gm[1:-1], -1.0 / prof.x[1:-1], rtol=1e-4)


@given(st.floats(10.0, 200.0), st.integers(1, 3), st.floats(0.2, 5.0))
def test_wall_osmotic_velocity_stays_timelike(L_ref, n, m):
    p = PhysicalParams(m=m)
    g = make_grid(50, 150, 400, 1.0, 2, FIXED_ZERO)
    prof = moving_wall_fields(n, PowerLawWall(L_ref, 100.0, 1.0), p, g)
    good = ~prof.mask
    assert np.max(np.abs(prof.u_D)) < p.c
    assert np.all(np.abs(prof.u[good]) < p.c)


def test_wall_equation_vs_stencil_order():
    errs, dxs = [], []
    for n_x in (250, 500, 1000):
        g = make_grid(50, 150, n_x, 1.0, 2, FIXED_ZERO)
        prof = moving_wall_fields(3, PowerLawWall(30.0, 100.0, 0.7), P1, g)
        good = ~prof.mask
        good[:2] = good[-2:] = False
        errs.append(np.max(np.abs(prof.grad_log_P_stencil - prof.grad_log_P)[good]))
        dxs.append(g.dx)
    assert I.fit_order(dxs, errs) == pytest.approx(2.0, abs=0.2)


def test_nonpositive_wall_rejected():
    g = make_grid(50, 150, 100, 1.0, 2, FIXED_ZERO)
    with pytest.raises(ValueError):
        moving_wall_fields(1, np.zeros(g.n_points), P1, g)


# ----------------------------------------------------------------------
# decaying mass and vacuum energy


@pytest.fixture(scope="module")
def packet_result():
    return compute_scenario(default_config("kg-packet"))


def test_decay_drift_velocity():
    res = compute_scenario(default_config("decaying-mass"))
    assert res.summary["u_D_expected"] == -0.05
    good = ~res.fields.mask
    # centred difference of exp(-a x) gives -a sinh(a h) / (a h)
    a, h = 0.1, res.fields.grid.dx
    np.testing.assert_allclose(res.fields.u_D[good], -0.05 * np.sinh(a * h) / (a * h),
                               rtol=1e-12)
    np.testing.assert_allclose(res.fields.u_D[good], -0.05, rtol=1e-5)


def test_zero_decay_collapses_to_constant_mass(packet_result):
    dec = decaying_mass_fields(1.0, 0.0, 1.0, packet_result.fields.polar, P1)
    reps = {r.equation_id: r for r in dec.reports}
    fs = dec.fields
    base = I.residual_nelson_pair(fs)[0]
    v = base.valid
    np.testing.assert_array_equal(reps["decay_osmotic"].residual[v], base.residual[v])


def test_decay_input_checks(packet_result):
    with pytest.raises(ValueError):
        decaying_mass_fields(1.0, -0.1, 1.0, packet_result.fields.polar, P1)
    with pytest.raises(ValueError):
        decaying_mass_fields(1.0, 0.1, 0.0, packet_result.fields.polar, P1)


def test_packet_shows_limiting_contrast(packet_result):
    s = packet_result.summary
    assert s["max_Q_over_mc2"] > 1e-2
    assert min(s["limiting_contrast"].values()) >= 10


def test_vacuum_energy_positivity():
    res = compute_scenario(default_config("vacuum-energy"))
    s = res.summary
    assert s["min_j0"] < 0
    assert s["min_total_j0"] >= 0
    assert s["E_vac"] >= s["minimal_evac"]


def test_vacuum_energy_convergence():
    conv = scenario_convergence(default_config("vacuum-energy"), 3, ["total_current"])
    assert conv["total_current"]["study"].order >= I.ORDER_BOUND
    assert strict_failures(conv) == []


def test_convergence_needs_three_levels():
    with pytest.raises(ConfigError):
        scenario_convergence(default_config("kg-plane-wave"), 2)


def test_stage_errors_carry_context():
    with pytest.raises(ConfigError, match="dt=.*dx=.*c="):
        default_config("kg-packet", {"courant": 1.5})
    cfg = default_config("box-eigenstate", {"source": "solver"})
    cfg.values["n"] = 0
    with pytest.raises(ScenarioError, match="box-eigenstate, stage"):
        compute_scenario(cfg)


# ----------------------------------------------------------------------
# run directories


def _small_gaussian(**kw):
    over = {"t_end": 0.1, "n_walkers": 2000, "n_tracked": 5, "save_every": 10,
            "outputs": "fields,velocities,residuals,trajectories,plotdata"}
    over.update(kw)
    return default_config("free-gaussian", over)


def _contents(run_dir):
    return {p.relative_to(run_dir).as_posix(): p.read_bytes()
            for p in sorted(run_dir.rglob("*")) if p.is_file()}


def test_runs_are_byte_identical_across_workers(tmp_path):
    cfg = _small_gaussian()
    a = _contents(run_scenario(cfg, tmp_path / "a", workers=1))
    b = _contents(run_scenario(cfg, tmp_path / "b", workers=4))
    c = _contents(run_scenario(cfg, tmp_path / "c", workers=1))
    assert a.keys() == b.keys() == c.keys()
    assert {"field.csv", "velocities.csv", "residuals.json", "ks.csv",
            "trajectories.csv", "manifest.json"} <= set(a)
    for name in a:
        assert a[name] == b[name] == c[name], name


def test_manifest_lists_every_file(tmp_path):
    run = run_scenario(default_config("box-eigenstate"), tmp_path / "box")
    man = read_manifest(run)
    files = {p.relative_to(run).as_posix() for p in run.rglob("*")
             if p.is_file() and p.name != "manifest.json"}
    assert set(man["files"]) == files
    for name, digest in man["files"].items():
        assert sha256_file(run / name) == digest
    assert man["config_hash"] == default_config("box-eigenstate").config_hash()
    assert man["scenario"] == "box-eigenstate"


def test_box_run_summary(tmp_path):
    run = run_scenario(default_config("box-eigenstate"), tmp_path / "box")
    body = json.loads((run / "residuals.json").read_text())
    s = body["summary"]
    assert s["energy_exact"] == pytest.approx(np.pi ** 2 / 2, rel=1e-15)
    assert s["energy_relative_error"] < 1e-3


def test_plotdata_omits_masked_samples(tmp_path):
    run = run_scenario(default_config("box-eigenstate"), tmp_path / "box")
    assert "u" in available_quantities(run)
    [path] = emit_plotdata(run, ["u"])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# quantity=u mask_fraction=")
    frac = float(lines[0].split("mask_fraction=")[1])
    assert 0 < frac < 0.5
    rows = [ln.split() for ln in lines if not ln.startswith("#") and ln.strip()]
    assert all(len(r) == 3 for r in rows)
    assert all(np.isfinite(float(r[2])) for r in rows)
    with pytest.raises(ConfigError, match="unknown quantity"):
        emit_plotdata(run, ["velocity"])


def test_plotdata_ks_pairs(tmp_path):
    run = run_scenario(_small_gaussian(), tmp_path / "g")
    [path] = emit_plotdata(run, ["ks"], tmp_path / "plots")
    rows = [ln.split() for ln in path.read_text().splitlines() if not ln.startswith("#")]
    assert all(len(r) == 2 for r in rows)
    assert float(rows[0][0]) == 0.0


def test_plotdata_residual_vs_dx(tmp_path):
    cfg = default_config("vacuum-energy", {"levels": "3", "equations": "total_current",
                                           "outputs": "residuals"})
    run = run_scenario(cfg, tmp_path / "vac")
    [path] = emit_plotdata(run, ["residual-vs-dx"])
    text = path.read_text()
    assert "order" in text
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    dx = [float(r[0]) for r in rows]
    assert len(rows) == 3 and dx == sorted(dx, reverse=True)
