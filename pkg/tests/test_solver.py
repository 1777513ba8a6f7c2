import json
import warnings

import numpy as np
import pytest

from nestpart.dg_core import State
from nestpart.errors import NumericalError
from nestpart.mesh import MeshConfig, TreeSpec, build_mesh
from nestpart.partition import nested_partition, ratio_balancer
from nestpart.physics import Material
from nestpart.solver import (
    KERNELS,
    CflWarning,
    PlaneWave,
    SolveConfig,
    Solver,
    advance,
    gaussian_pulse,
    random_state,
    read_snapshot,
    run,
    write_outputs,
    write_snapshot,
)

ACOUSTIC = Material.from_speeds(1.0, 1.0, 0.0)


def column(n, h, materials=None):
    materials = materials or [0] * n
    return build_mesh(MeshConfig(tuple(TreeSpec((i * h, 0, 0), m) for i, m in enumerate(materials)), 0, h))


def test_zero_state_zero_rate():
    s = Solver(build_mesh(MeshConfig.brick(1)), 3, {0: Material(1.0, 1.0, 1.0)})
    q = np.zeros((8, 12, 4, 4, 4))
    assert np.all(s.rhs(0.0, q) == 0)


def test_constant_state_with_matching_traction_is_steady():
    mat = Material(1.5, 1.0, 0.7)
    rng = np.random.default_rng(0)
    E = rng.standard_normal((3, 3))
    E = E + E.T
    S = mat.lam * np.trace(E) * np.eye(3) + 2 * mat.mu * E
    s = Solver(build_mesh(MeshConfig.brick(1)), 3, {0: mat}, boundary=lambda x, t, n: np.einsum(
        "ij,j->i", S, n)[:, None, None, None] * np.ones(x.shape[1:]))
    q = np.zeros((8, 12, 4, 4, 4))
    for i in range(3):
        for j in range(3):
            q[:, i + 3 * j] = E[i, j]
    q[:, 9:] = rng.standard_normal(3)[None, :, None, None, None]
    assert np.abs(s.rhs(0.0, q)).max() < 1e-12


def test_plane_wave_rate_on_element_column():
    mat = ACOUSTIC
    wave = PlaneWave(wavenumber=1.0, phase=0.3)
    s = Solver(column(4, 0.25), 6, {0: mat}, boundary=wave.traction(mat))
    t = 0.37
    err = np.abs(s.rhs(t, wave.state(s.X, t, mat)) - wave.rate(s.X, t, mat)).max()
    assert err <= 1e-8


def test_plane_wave_rate_elastic_along_y():
    mat = Material.from_speeds(2.0, 2.0, 1.2)
    wave = PlaneWave(axis=1, direction=-1, wavenumber=1.0)
    s = Solver(build_mesh(MeshConfig.brick(2)), 6, {0: mat}, boundary=wave.traction(mat))
    err = np.abs(s.rhs(0.1, wave.state(s.X, 0.1, mat)) - wave.rate(s.X, 0.1, mat)).max()
    assert err <= 1e-8


def test_non_finite_rate_names_element():
    s = Solver(build_mesh(MeshConfig.brick(1)), 2, {0: ACOUSTIC})
    q = np.zeros((8, 12, 3, 3, 3))
    q[5, 9, 1, 1, 1] = np.nan
    with pytest.raises(NumericalError, match="element 5"):
        s.rhs(0.0, q)


def test_zero_initial_condition_stays_zero():
    s = Solver(build_mesh(MeshConfig.brick(1)), 3, {0: ACOUSTIC})
    out, diag = advance(s, State(np.zeros((8, 12, 4, 4, 4))), s.max_timestep(), 5)
    assert np.all(out.q == 0)
    assert out.step == 5 and all(e == 0 for _, _, e in diag.energy)


def test_gaussian_energy_non_increasing():
    mesh = build_mesh(MeshConfig.brick(1))
    s = Solver(mesh, 4, {0: ACOUSTIC})
    q = gaussian_pulse(s.X, (0.5, 0.5, 0.5), 0.15)
    _, diag = advance(s, State(q), s.max_timestep(), 30)
    e = np.array([x[2] for x in diag.energy])
    assert np.all(np.diff(e) <= 1e-12 * e[0])
    assert e[-1] < e[0]


def test_snell_normal_incidence_transmission():
    # acoustic tree (c_p = 1) against an elastic tree (c_p = 3, c_s = 2)
    m1, m2 = Material.from_speeds(1.0, 1.0, 0.0), Material.from_speeds(1.0, 3.0, 2.0)
    c1, c2, X0 = 1.0, 3.0, 1.0
    Z1, Z2 = m1.rho * c1, m2.rho * c2
    Tv, Rv = 2 * Z1 / (Z1 + Z2), (Z1 - Z2) / (Z1 + Z2)
    mesh = build_mesh(MeshConfig((TreeSpec((0, 0, 0), 0), TreeSpec((1, 0, 0), 1)), 1))
    f = PlaneWave(shape="gaussian", center=0.5, width=0.1).profile

    def exact_E(x, t):
        left = f(x - c1 * t) - Rv * f(2 * X0 - x - c1 * t)
        right = Tv * (c1 / c2) * f(X0 - c1 * (t - (x - X0) / c2))
        return np.where(x <= X0, left, right)

    def traction(x, t, n):
        E = exact_E(x[0], t)
        lam = np.where(x[0] <= X0, m1.lam, m2.lam)
        mu = np.where(x[0] <= X0, m1.mu, m2.mu)
        return np.stack([(lam + 2 * mu * (i == 0)) * E * n[i] for i in range(3)])

    s = Solver(mesh, 7, {0: m1, 1: m2}, boundary=traction)
    q0 = PlaneWave(shape="gaussian", center=0.5, width=0.1).state(s.X, 0.0, m1)
    q0[mesh.material_ids == 1] = 0.0
    T = 0.75
    steps = int(np.ceil(T / s.max_timestep()))
    out, _ = advance(s, State(q0), T / steps, steps)

    X, v = s.X[:, 0], out.q[:, 9]
    right = mesh.material_ids == 1
    transmitted = -c1 * f(X0 - c1 * (T - (X[right] - X0) / c2))
    assert np.abs(v[right]).max() > 0.1  # the wave did cross
    t_fit = (v[right] * transmitted).sum() / (transmitted**2).sum()
    reflected = -c1 * f(2 * X0 - X[~right] - c1 * T)
    incident = -c1 * f(X[~right] - c1 * T)
    r_fit = ((v[~right] - incident) * reflected).sum() / (reflected**2).sum()
    assert t_fit == pytest.approx(Tv, rel=0.02)
    assert r_fit == pytest.approx(Rv, rel=0.02)


def test_partitioned_and_threaded_runs_are_bitwise_identical():
    mesh = build_mesh(MeshConfig.brick(2))
    q0 = random_state((64, 12, 4, 4, 4), seed=3, amplitude=0.1)
    base = Solver(mesh, 3, {0: Material(1.0, 1.0, 0.5)})
    part = nested_partition(mesh, 2, ratio_balancer(1.0), 3)
    split = Solver(mesh, 3, {0: Material(1.0, 1.0, 0.5)}, partition=part, threads=2)
    dt = base.max_timestep()
    a, _ = advance(base, State(q0), dt, 3)
    b, _ = advance(split, State(q0), dt, 3)
    assert np.array_equal(a.q, b.q)


def test_kernel_times_are_recorded():
    mesh = build_mesh(MeshConfig.brick(1))
    part = nested_partition(mesh, 2, ratio_balancer(0.0), 2)
    s = Solver(mesh, 2, {0: ACOUSTIC}, partition=part)
    _, diag = advance(s, State(random_state((8, 12, 3, 3, 3))), s.max_timestep(), 2)
    assert set(diag.kernel_times) == set(KERNELS)
    for k in ("volume_loop", "interp_q", "lift", "rk", "bound_flux", "int_flux", "parallel_flux"):
        assert diag.kernel_times[k] > 0, k


def test_cfl_warning():
    s = Solver(build_mesh(MeshConfig.brick(0)), 2, {0: ACOUSTIC})
    with pytest.warns(CflWarning):
        advance(s, State(np.zeros((1, 12, 3, 3, 3))), 2 * s.max_timestep(), 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        advance(s, State(np.zeros((1, 12, 3, 3, 3))), s.max_timestep(), 1)


def test_unknown_boundary_and_missing_material():
    mesh = build_mesh(MeshConfig.brick(0))
    with pytest.raises(ValueError, match="boundary"):
        Solver(mesh, 2, {0: ACOUSTIC}, boundary="sticky")
    with pytest.raises(ValueError, match="face"):
        Solver(mesh, 2, {0: ACOUSTIC}, boundary={"w+": "free"})
    with pytest.raises(ValueError, match="material"):
        Solver(mesh, 2, {1: ACOUSTIC})


def test_snapshot_roundtrip(tmp_path):
    q = random_state((3, 12, 4, 4, 4), seed=1)
    path = tmp_path / "s.dgae"
    write_snapshot(path, q, 3)
    raw = path.read_bytes()
    assert raw[:4] == b"DGAE" and len(raw) == 4 + 16 + 8 * q.size
    # component-major: the first block is component 0 of every element
    first = np.frombuffer(raw[20:20 + 8 * 3 * 64], dtype="<f8").reshape(3, 4, 4, 4)
    assert np.array_equal(first, q[:, 0])
    order, back = read_snapshot(path)
    assert order == 3 and np.array_equal(back, q)
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_snapshot(path)


def test_config_driven_run(tmp_path):
    data = {
        "order": 2,
        "mesh": {"trees": [{"origin": [0, 0, 0], "material_id": 0}], "level": 1},
        "materials": {"0": {"rho": 1.0, "cp": 1.0, "cs": 0.0}},
        "steps": 4,
        "initial": {"kind": "gaussian", "width": 0.2},
        "output_every": 2,
        "partition": {"nodes": 2, "ratio": 1.0},
    }
    cfg = SolveConfig.from_json(json.loads(json.dumps(data)))
    state, diag, solver = run(cfg)
    assert state.step == 4 and len(diag.energy) == 5
    write_outputs(tmp_path, cfg, state, diag, solver)
    lines = (tmp_path / "energy.csv").read_text().splitlines()
    assert lines[0] == "step,time,energy" and len(lines) == 6
    kt = (tmp_path / "kernel_times.csv").read_text().splitlines()
    assert kt[0] == "kernel,N,K,seconds" and len(kt) == 1 + len(KERNELS)
    assert sorted(p.name for p in tmp_path.glob("*.dgae")) == [
        "final.dgae", "snapshot_000002.dgae", "snapshot_000004.dgae",
    ]


def test_config_validation():
    mesh = MeshConfig.brick(0)
    with pytest.raises(ValueError):
        SolveConfig(2, mesh, {0: ACOUSTIC}, steps=0)
    with pytest.raises(ValueError):
        SolveConfig(2, mesh, {0: ACOUSTIC}, dt=-1.0)
