import math

import numpy as np
import pytest

from manp.diagnostics import (
    TimeSeriesLog,
    curl_residual,
    error_concentration,
    error_displacement,
    free_energy,
    gauss_residual,
    min_concentration,
    total_mass,
)
from manp.errors import ManpError, NonpositiveConcentration
from manp.grid import (
    BC_PERIODIC,
    CellField,
    FaceVectorField,
    StaggeredGrid,
)
from manp.operators import PermittivityField
from manp.stepper import SimulationState, SpeciesState


def grid2d(nx=4, ny=4, periodic=False):
    dx = 2.0 / nx
    dy = 2.0 / ny
    kw = {}
    if periodic:
        kw = dict(bc_concentration=BC_PERIODIC, bc_displacement=BC_PERIODIC)
    return StaggeredGrid(nx, dx, -1.0, ny, dy, -1.0, **kw)


def test_total_mass_unit_box():
    g = grid2d(nx=10, ny=10)
    assert total_mass(CellField.full(g, 1.0)) == pytest.approx(4.0)
    assert total_mass(CellField.zeros(g)) == 0.0


def test_total_mass_matches_compensated_sum():
    rng = np.random.default_rng(5)
    g = grid2d(nx=16, ny=16)
    vals = rng.normal(size=g.cell_shape)
    got = total_mass(CellField(g, vals))
    oracle = math.fsum(vals.ravel()) * g.cell_volume
    assert got == pytest.approx(oracle, rel=1e-13, abs=1e-15)


def test_min_concentration():
    g = grid2d()
    c = CellField.full(g, 1.0)
    assert min_concentration(c) == 1.0
    c.values[2, 1] = 1e-9
    assert min_concentration(c) == 1e-9


def make_state(g, c_vals, disp=None, eps_val=1.0, n_species=1):
    eps = PermittivityField.uniform(g, eps_val)
    species = [SpeciesState(1 if i % 2 == 0 else -1,
                            CellField(g, np.array(c_vals, dtype=float)))
               for i in range(n_species)]
    disp = disp or FaceVectorField.zeros(g)
    return SimulationState(g, species, disp, CellField.zeros(g), eps)


def test_free_energy_uniform_unit_concentration():
    g = grid2d(nx=6, ny=6)
    for n in (1, 2):
        st = make_state(g, np.ones(g.cell_shape), n_species=n)
        # 1*(ln 1 - 1) = -1 per species per unit area, area 4
        assert free_energy(st) == pytest.approx(-4.0 * n)


def test_free_energy_e_concentration_is_zero():
    g = grid2d(nx=6, ny=6)
    st = make_state(g, np.full(g.cell_shape, math.e))
    assert free_energy(st) == pytest.approx(0.0, abs=1e-12)


def test_free_energy_rejects_nonpositive():
    g = grid2d()
    st = make_state(g, np.ones(g.cell_shape))
    st.species[0].concentration.values[0, 0] = 0.0
    with pytest.raises(NonpositiveConcentration):
        free_energy(st)


def test_error_concentration_basic_and_symmetry():
    rng = np.random.default_rng(7)
    g = grid2d(nx=5, ny=3)
    a = CellField(g, rng.normal(size=g.cell_shape))
    assert error_concentration(a, a) == 0.0
    b = CellField(g, a.values + 0.37)
    assert error_concentration(a, b) == pytest.approx(0.37)
    c = CellField(g, rng.normal(size=g.cell_shape))
    assert error_concentration(a, c) == error_concentration(c, a)
    # triangle inequality on random triples
    ab = error_concentration(a, b)
    bc = error_concentration(b, c)
    ac = error_concentration(a, c)
    assert ac <= ab + bc + 1e-12


def test_error_concentration_matches_direct_formula():
    rng = np.random.default_rng(8)
    g = grid2d(nx=4, ny=6)
    a = CellField(g, rng.normal(size=g.cell_shape))
    b = CellField(g, rng.normal(size=g.cell_shape))
    direct = math.sqrt(math.fsum((x - y) ** 2 for x, y in
                                 zip(a.values.ravel(), b.values.ravel()))
                       / g.n_cells)
    assert error_concentration(a, b) == pytest.approx(direct, rel=1e-13)


def test_error_displacement_constant_offset():
    g = grid2d(nx=5, ny=5)
    a = FaceVectorField.zeros(g)
    b = FaceVectorField(g, np.full(g.xface_shape, 3.0),
                        np.full(g.yface_shape, 4.0))
    assert error_displacement(a, a) == 0.0
    assert error_displacement(a, b) == pytest.approx(5.0)
    assert error_displacement(a, b) == error_displacement(b, a)


def test_error_displacement_matches_recompute():
    rng = np.random.default_rng(9)
    g = grid2d(nx=4, ny=4)
    a = FaceVectorField(g, rng.normal(size=g.xface_shape),
                        rng.normal(size=g.yface_shape))
    b = FaceVectorField(g, rng.normal(size=g.xface_shape),
                        rng.normal(size=g.yface_shape))
    total = 0.0
    for j in range(g.ny):
        for i in range(g.nx):
            dax = 0.5 * (a.x[j, i] + a.x[j, i + 1]) - 0.5 * (b.x[j, i] + b.x[j, i + 1])
            day = 0.5 * (a.y[j, i] + a.y[j + 1, i]) - 0.5 * (b.y[j, i] + b.y[j + 1, i])
            total += math.hypot(dax, day)
    assert error_displacement(a, b) == pytest.approx(total / g.n_cells, rel=1e-13)


def test_gauss_residual_single_face_perturbation():
    g = grid2d(nx=5, ny=5)
    st = make_state(g, np.zeros(g.cell_shape) + 1.0, n_species=2)
    base = gauss_residual(st)
    st.displacement.x[2, 2] += 1.0
    assert gauss_residual(st) == pytest.approx(base + 1.0 / g.dx, abs=1e-12)


def test_curl_residual_zero_for_gradient_field():
    from manp.operators import potential_gradient_to_faces
    rng = np.random.default_rng(10)
    g = grid2d(nx=6, ny=6)
    eps = PermittivityField.uniform(g, 1.0)
    phi = CellField(g, rng.normal(size=g.cell_shape))
    grad = potential_gradient_to_faces(phi, eps)
    st = make_state(g, np.ones(g.cell_shape),
                    disp=FaceVectorField(g, -grad.x, -grad.y))
    assert curl_residual(st) <= 1e-12


def test_timeseries_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    log = TimeSeriesLog()
    times = np.cumsum(rng.uniform(0.01, 0.1, size=20))
    for t in times:
        log.append("mass_c1", t, rng.normal())
        log.append("gauss", t, rng.normal() * 1e-12)
    path = tmp_path / "timeseries.csv"
    log.to_csv(path, header_meta="scenario=test seed=0 version=x")
    back = TimeSeriesLog.from_csv(path)
    assert back.names() == log.names()
    for name in log.names():
        assert np.array_equal(back.column(name), log.column(name))
        assert back.channels[name] == log.channels[name]


def test_timeseries_rejects_nonmonotone():
    log = TimeSeriesLog()
    log.append("m", 0.1, 1.0)
    with pytest.raises(ManpError):
        log.append("m", 0.1, 2.0)


def test_free_energy_decays_on_disk_scenario(tmp_path):
    # after a short transient the free energy is non-increasing
    from manp.cli import run_scenario
    from manp.scenarios import resolve_config
    cfg = resolve_config("electro2d", theta="lagged", steps=60, nx=24, ny=24,
                         out=str(tmp_path / "fe"))
    res = run_scenario(cfg, progress=False)
    fe = res.log.column("free_energy")
    assert np.all(np.diff(fe)[5:] <= 1e-12)
