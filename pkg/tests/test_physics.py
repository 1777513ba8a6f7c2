import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestpart.mesh import MeshConfig, TreeSpec, build_mesh
from nestpart.physics import (
    Material,
    WaveState,
    constitutive,
    energy,
    energy_density,
    flux,
    interface_jumps,
    riemann_flux,
    traction_bc,
    upwind_bracket,
)
from nestpart.solver import PlaneWave, Solver, State, advance


def random_state(rng, tail=()):
    return WaveState(rng.standard_normal((3, 3) + tail), rng.standard_normal((3,) + tail))


def random_material(rng, acoustic=False):
    rho = rng.uniform(0.5, 3.0)
    cp = rng.uniform(1.0, 4.0)
    cs = 0.0 if acoustic else rng.uniform(0.1, 0.7) * cp
    return Material.from_speeds(rho, cp, cs)


def random_normal(rng):
    n = rng.standard_normal(3)
    return n / np.linalg.norm(n)


# -- constitutive relation ---------------------------------------------------


def test_constitutive_examples():
    assert np.allclose(constitutive(Material(1.0, 1.0, 0.0), np.eye(3)), 3 * np.eye(3))
    assert np.all(constitutive(Material(1.0, 2.0, 3.0), np.zeros((3, 3))) == 0)


def test_wave_speeds_from_lame():
    m = Material(1.0, 1.0, 4.0)
    assert m.cp == pytest.approx(3.0) and m.cs == pytest.approx(2.0)
    back = Material.from_speeds(1.0, 3.0, 2.0)
    assert (back.lam, back.mu) == pytest.approx((1.0, 4.0))


def test_constitutive_symmetric():
    rng = np.random.default_rng(1)
    S = constitutive(Material(1.3, 0.7, 2.1), random_state(rng, (5,)).E)
    assert np.allclose(S, S.swapaxes(0, 1))


def test_invalid_material():
    with pytest.raises(ValueError):
        Material(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        Material(1.0, 1.0, -1.0)
    with pytest.raises(ValueError):
        Material(1.0, -3.0, 1.0)


# -- physical flux -------------------------------------------------------------


def test_flux_examples():
    m = Material(1.0, 2.0, 1.0)
    s = WaveState(np.zeros((3, 3)), np.zeros(3))
    assert np.all(flux(s, m, 0).E == 0)
    f = flux(WaveState(np.zeros((3, 3)), np.array([1.0, 0.0, 0.0])), m, 0)
    expect = np.zeros((3, 3))
    expect[0, 0] = -1.0
    assert np.array_equal(f.E, expect)
    with pytest.raises(ValueError):
        flux(s, m, 3)


def test_flux_velocity_part_is_minus_traction():
    rng = np.random.default_rng(2)
    m = Material(1.0, 1.5, 0.8)
    s = random_state(rng)
    S = constitutive(m, s.E)
    for i in range(3):
        assert np.allclose(flux(s, m, i).v, -S[:, i])


def test_flux_divergence_matches_finite_differences():
    # closed-form smooth field; the analytic divergence follows from linearity
    rng = np.random.default_rng(3)
    m = Material(1.2, 0.9, 1.7)
    A = rng.standard_normal((12, 3))
    B = rng.standard_normal(12)

    def field(x):
        q = np.sin(A @ x + B)
        return WaveState(q[:9].reshape(3, 3).T, q[9:])

    def dfield(x, i):
        dq = A[:, i] * np.cos(A @ x + B)
        return WaveState(dq[:9].reshape(3, 3).T, dq[9:])

    x0 = rng.uniform(-1, 1, 3)
    exact_E = sum(flux(dfield(x0, i), m, i).E for i in range(3))
    exact_v = sum(flux(dfield(x0, i), m, i).v for i in range(3))
    h = 1e-4
    fd_E = np.zeros((3, 3))
    fd_v = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        hi, lo = flux(field(x0 + e), m, i), flux(field(x0 - e), m, i)
        fd_E += (hi.E - lo.E) / (2 * h)
        fd_v += (hi.v - lo.v) / (2 * h)
    assert np.abs(fd_E - exact_E).max() < 1e-6
    assert np.abs(fd_v - exact_v).max() < 1e-6


# -- Riemann bracket -----------------------------------------------------------


def test_identical_acoustic_k0():
    m = Material.from_speeds(1.0, 1.0, 0.0)
    n = np.array([1.0, 0.0, 0.0])
    qm = WaveState(np.zeros((3, 3)), np.zeros(3))
    Ep = np.zeros((3, 3))
    Ep[0, 0] = -1.0  # S+ n = -n, so [[CE]] . n = 1
    b = riemann_flux(qm, WaveState(Ep, np.zeros(3)), m, m, n)
    assert b.v[0] == pytest.approx(0.5)
    assert b.E[0, 0] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(5))
def test_consistency(seed):
    rng = np.random.default_rng(seed)
    q = random_state(rng)
    for acoustic in (False, True):
        m = random_material(rng, acoustic)
        b = riemann_flux(q, q, m, m, random_normal(rng))
        assert np.abs(b.E).max() <= 1e-14 and np.abs(b.v).max() <= 1e-14


def characteristic_bracket(qm, qp, mm, mp, n):
    """n.[(Fq)* - Fq] from the exact interface state of the 1D system along n.

    Each mode (normal, two tangential) is a 2x2 hyperbolic system whose
    right-going invariant t - Z v comes from the minus side and left-going
    invariant t + Z v from the plus side; solving both gives (v*, t*).
    """
    Sm, Sp = constitutive(mm, qm.E), constitutive(mp, qp.E)
    tm, tp = Sm @ n, Sp @ n
    zp_m, zp_p = mm.rho * mm.cp, mp.rho * mp.cp
    zs_m, zs_p = mm.rho * mm.cs, mp.rho * mp.cs

    def solve(t_m, t_p, v_m, v_p, z_m, z_p):
        # eigenvectors of [[0, 1/rho], [rho c^2, 0]] in (v, t) give the two relations
        A = np.array([[-z_m, 1.0], [z_p, 1.0]])
        rhs = np.array([t_m - z_m * v_m, t_p + z_p * v_p])
        return np.linalg.solve(A, rhs)

    vn, tn = solve(tm @ n, tp @ n, qm.v @ n, qp.v @ n, zp_m, zp_p)
    v_star = vn * n
    t_star = tn * n
    if mm.mu != 0:
        P = np.eye(3) - np.outer(n, n)
        basis = np.linalg.svd(P)[0][:, :2]
        for e in basis.T:
            if mp.mu == 0:
                # plus side carries no shear: t* = 0, v* from the minus invariant
                ts = 0.0
                vs = qm.v @ e - (tm @ e) / zs_m
            else:
                vs, ts = solve(tm @ e, tp @ e, qm.v @ e, qp.v @ e, zs_m, zs_p)
            v_star = v_star + vs * e
            t_star = t_star + ts * e
    else:
        # acoustic minus side: tangential parts of the bracket are dropped
        v_star = v_star + (qm.v - (qm.v @ n) * n)
        t_star = t_star + (tm - (tm @ n) * n)
    star = -0.5 * (np.outer(v_star, n) + np.outer(n, v_star)), -t_star
    own = -0.5 * (np.outer(qm.v, n) + np.outer(n, qm.v)), -tm
    return star[0] - own[0], star[1] - own[1]


@pytest.mark.parametrize(
    "acoustic_m, acoustic_p",
    [(True, True), (False, False), (False, True), (True, False)],
)
def test_bracket_matches_characteristic_solution(acoustic_m, acoustic_p):
    rng = np.random.default_rng(10 + 2 * acoustic_m + acoustic_p)
    for _ in range(20):
        mm, mp = random_material(rng, acoustic_m), random_material(rng, acoustic_p)
        n = random_normal(rng)
        qm, qp = random_state(rng), random_state(rng)
        if acoustic_m:
            qm = WaveState(np.trace(qm.E) / 3 * np.eye(3), qm.v)
        if acoustic_p:
            qp = WaveState(np.trace(qp.E) / 3 * np.eye(3), qp.v)
        got = riemann_flux(qm, qp, mm, mp, n)
        E, v = characteristic_bracket(qm, qp, mm, mp, n)
        assert np.allclose(got.E, E, atol=1e-12)
        assert np.allclose(got.v, v, atol=1e-12)


def test_elastic_to_acoustic_shear_traction_vanishes():
    rng = np.random.default_rng(4)
    mm, mp = random_material(rng), random_material(rng, acoustic=True)
    n = np.array([0.0, 0.0, 1.0])
    qm, qp = random_state(rng), random_state(rng)
    b = riemann_flux(qm, qp, mm, mp, n)
    t_star = constitutive(mm, qm.E) @ n - b.v
    assert np.allclose(t_star[:2], 0.0, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bracket_strain_symmetric(seed):
    rng = np.random.default_rng(seed)
    m = random_material(rng, acoustic=bool(seed % 3 == 0))
    p = random_material(rng, acoustic=bool(seed % 2 == 0))
    b = riemann_flux(random_state(rng, (4,)), random_state(rng, (4,)), m, p, random_normal(rng))
    assert np.array_equal(b.E, b.E.swapaxes(0, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_bracket_linear_in_states(seed, a, c):
    rng = np.random.default_rng(seed)
    m, p = random_material(rng), random_material(rng)
    n = random_normal(rng)
    q1m, q1p, q2m, q2p = (random_state(rng) for _ in range(4))
    comb = lambda x, y: WaveState(a * x.E + c * y.E, a * x.v + c * y.v)
    lhs = riemann_flux(comb(q1m, q2m), comb(q1p, q2p), m, p, n)
    r1, r2 = riemann_flux(q1m, q1p, m, p, n), riemann_flux(q2m, q2p, m, p, n)
    assert np.allclose(lhs.E, a * r1.E + c * r2.E, atol=1e-11)
    assert np.allclose(lhs.v, a * r1.v + c * r2.v, atol=1e-11)


def test_acoustic_minus_side_has_no_tangential_bracket():
    rng = np.random.default_rng(5)
    mm, mp = random_material(rng, acoustic=True), random_material(rng)
    n = np.array([1.0, 0.0, 0.0])
    b = riemann_flux(random_state(rng), random_state(rng), mm, mp, n)
    assert np.allclose(b.v[1:], 0.0)
    assert np.allclose(b.E[1:, 1:], 0.0) and np.allclose(b.E[0, 1:], 0.0)


def test_batched_bracket_matches_pointwise():
    rng = np.random.default_rng(6)
    mm = Material(np.array([1.0, 2.0]), np.array([1.0, 0.5]), np.array([0.0, 1.5]))
    mp = Material(np.array([1.5, 1.0]), np.array([2.0, 1.0]), np.array([1.0, 0.0]))
    n = np.array([0.0, -1.0, 0.0])
    qm, qp = random_state(rng, (2, 3, 3)), random_state(rng, (2, 3, 3))
    batch = riemann_flux(qm, qp, mm, mp, n)
    for k in range(2):
        one = riemann_flux(
            WaveState(qm.E[:, :, k], qm.v[:, k]), WaveState(qp.E[:, :, k], qp.v[:, k]),
            mm.take(k), mp.take(k), n,
        )
        assert np.array_equal(one.E, batch.E[:, :, k]) and np.array_equal(one.v, batch.v[:, k])


# -- traction boundary -------------------------------------------------------------


def test_traction_bc_equilibrium_gives_zero_bracket():
    rng = np.random.default_rng(7)
    m = random_material(rng)
    n = random_normal(rng)
    q = random_state(rng)
    t = constitutive(m, q.E) @ n
    b = upwind_bracket(traction_bc(q, m, n, t), m, m, n)
    assert np.abs(b.E).max() < 1e-13 and np.abs(b.v).max() < 1e-13


def test_traction_bc_free_surface_jump():
    n = np.array([0.0, 1.0, 0.0])
    m = Material(1.0, 1.0, 0.0)
    q = WaveState(np.eye(3) / 3, np.array([0.3, -0.2, 0.1]))  # S n = n
    j = traction_bc(q, m, n, np.zeros(3))
    assert np.allclose(j.traction, 2 * n)
    assert np.all(j.normal_velocity == 0) and np.all(j.velocity == 0)


def test_interface_jump_signs():
    m = Material(1.0, 1.0, 1.0)
    n = np.array([1.0, 0.0, 0.0])
    qm = WaveState(np.zeros((3, 3)), np.array([2.0, 1.0, 0.0]))
    qp = WaveState(np.zeros((3, 3)), np.array([0.5, 0.0, 0.0]))
    j = interface_jumps(qm, qp, m, m, n)
    assert j.normal_velocity == pytest.approx(1.5)
    assert np.allclose(j.velocity, [1.5, 1.0, 0.0])


def test_free_surface_reflection_coefficients():
    # P pulse in a column of four elements; x+ is free, every other face gets
    # the exact traction of the d'Alembert solution f(x - ct) - f(2L - x - ct)
    h, c = 0.25, 2.0
    mat = Material.from_speeds(1.0, c, 1.0)
    mesh = build_mesh(MeshConfig(tuple(TreeSpec((i * h, 0, 0)) for i in range(4)), 0, h))
    L = 4 * h
    wave = PlaneWave(shape="gaussian", center=L / 2, width=0.125)
    f = wave.profile

    def exact_traction(x, t, n):
        E = f(x[0] - c * t) - f(2 * L - x[0] - c * t)
        return np.stack([(mat.lam + 2 * mat.mu * (i == 0)) * E * n[i] for i in range(3)])

    solver = Solver(mesh, 6, {0: mat}, boundary={"default": exact_traction, "x+": "free"})
    T = L / c
    steps = int(np.ceil(T / solver.max_timestep()))
    out, _ = advance(solver, State(wave.state(solver.X, 0.0, mat)), T / steps, steps)
    g = f(2 * L - solver.X[:, 0] - c * T)  # reflected profile; incident had E = f, v = -c f
    strain_coeff = (out.q[:, 0] * g).sum() / (g * g).sum()
    velocity_coeff = (out.q[:, 9] * -c * g).sum() / (c * c * g * g).sum()
    assert strain_coeff == pytest.approx(-1.0, abs=1e-3)
    assert velocity_coeff == pytest.approx(1.0, abs=1e-3)


# -- energy ---------------------------------------------------------------------------


def test_energy_examples():
    m = Material(1.0, 1.0, 1.0)
    w = np.full(4, 0.25)  # four nodes covering a unit volume
    zero = WaveState(np.zeros((3, 3, 4)), np.zeros((3, 4)))
    assert energy(zero, m, w) == 0.0
    v = np.zeros((3, 4))
    v[0] = 1.0
    assert energy(WaveState(np.zeros((3, 3, 4)), v), m, w) == pytest.approx(0.5)


def test_energy_density_strain_part():
    m = Material(1.0, 1.0, 0.0)
    e = energy_density(WaveState(np.eye(3), np.zeros(3)), m)
    assert e == pytest.approx(0.5 * 9.0)


def test_energy_of_unit_velocity_on_mesh():
    mesh = build_mesh(MeshConfig.brick(1))
    s = Solver(mesh, 3, {0: Material(1.0, 1.0, 0.0)})
    q = np.zeros((8, 12, 4, 4, 4))
    q[:, 9] = 1.0
    assert s.energy(q) == pytest.approx(0.5)


def test_standing_wave_energy_drift():
    # free x faces; lateral faces carry the exact (work-free) traction
    mat = Material.from_speeds(1.0, 1.0, 0.0)
    k = np.pi

    def lateral(x, t, n):
        s = mat.lam * np.sin(k * x[0]) * np.cos(k * t)
        return np.stack([s * n[0], s * n[1], s * n[2]])

    solver = Solver(
        build_mesh(MeshConfig.brick(0)), 6, {0: mat}, boundary={"default": lateral, "x-": "free", "x+": "free"}
    )
    q = np.zeros((1, 12) + solver.X.shape[2:])
    q[:, 0] = np.sin(k * solver.X[:, 0])
    T = 2 * np.pi / k
    steps = int(np.ceil(T / solver.max_timestep()))
    _, diag = advance(solver, State(q), T / steps, steps)
    e = np.array([x[2] for x in diag.energy])
    assert abs(e[-1] - e[0]) / e[0] <= 1e-6
