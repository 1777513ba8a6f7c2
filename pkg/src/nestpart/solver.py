"""Semi-discrete dG assembly and the RK4 time loop.

The right-hand side is evaluated per element group (one group per host or
device part of every node when a partition is supplied). Each face bracket
is computed once into a per-(element, face) buffer and every element lifts
its six faces in the same order, so the result is bitwise independent of
the grouping.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import physics
from .dg_core import (
    NUM_COMPONENTS,
    BrickGeometry,
    ReferenceElement,
    State,
    cfl_timestep,
    interp_q,
    lift,
    rk_step,
    volume_loop,
)
from .errors import NumericalError
from .mesh import Mesh, MeshConfig, build_mesh, extract_face_mesh, face_normal
from .physics import Material, WaveState

log = logging.getLogger(__name__)

KERNELS = ("volume_loop", "int_flux", "interp_q", "lift", "rk", "bound_flux", "parallel_flux")
FACE_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")

SNAPSHOT_MAGIC = b"DGAE"
SNAPSHOT_VERSION = 1


class CflWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Field layout helpers
# ---------------------------------------------------------------------------


def to_wave_state(x) -> WaveState:
    """(F, 12, ...) component array -> WaveState with component-first axes."""
    F = x.shape[0]
    E = x[:, :9].reshape((F, 3, 3) + x.shape[2:])  # [F, j, i]
    axes = (2, 1, 0) + tuple(range(3, E.ndim))
    v_axes = (1, 0) + tuple(range(2, x.ndim))
    return WaveState(E.transpose(axes), x[:, 9:].transpose(v_axes))


def from_wave_state(s: WaveState) -> np.ndarray:
    F = s.v.shape[1]
    tail = s.v.shape[2:]
    out = np.empty((F, NUM_COMPONENTS) + tail)
    axes = (2, 1, 0) + tuple(range(3, s.E.ndim))
    out[:, :9] = s.E.transpose(axes).reshape((F, 9) + tail)
    out[:, 9:] = s.v.transpose((1, 0) + tuple(range(2, s.v.ndim)))
    return out


def node_coordinates(mesh: Mesh, ref: ReferenceElement) -> np.ndarray:
    """Physical node positions, shape (K, 3, M, M, M) with node axes (r3, r2, r1)."""
    h = mesh.element_size
    r = 0.5 * (ref.nodes + 1.0) * h
    o = mesh.element_origins()
    M = ref.M
    X = np.empty((mesh.num_elements, 3, M, M, M))
    X[:, 0] = o[:, 0, None, None, None] + r[None, None, None, :]
    X[:, 1] = o[:, 1, None, None, None] + r[None, None, :, None]
    X[:, 2] = o[:, 2, None, None, None] + r[None, :, None, None]
    return X


# ---------------------------------------------------------------------------
# Initial and boundary data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlaneWave:
    """Longitudinal plane wave E_aa = f(x_a - d c_p t), v_a = -d c_p f."""

    axis: int = 0
    direction: int = 1
    amplitude: float = 1.0
    shape: str = "sin"
    wavenumber: float = 2 * math.pi
    phase: float = 0.0
    center: float = 0.5
    width: float = 0.1

    def profile(self, s):
        if self.shape == "sin":
            return self.amplitude * np.sin(self.wavenumber * s + self.phase)
        if self.shape == "gaussian":
            return self.amplitude * np.exp(-((s - self.center) ** 2) / (2 * self.width**2))
        raise ValueError(f"unknown plane-wave shape {self.shape!r}")

    def dprofile(self, s):
        if self.shape == "sin":
            return self.amplitude * self.wavenumber * np.cos(self.wavenumber * s + self.phase)
        g = self.profile(s)
        return -g * (s - self.center) / self.width**2

    def _arg(self, X, t, cp):
        return X[:, self.axis] - self.direction * cp * t

    def state(self, X, t, mat: Material):
        cp = float(mat.cp)
        f = self.profile(self._arg(X, t, cp))
        q = np.zeros((X.shape[0], NUM_COMPONENTS) + X.shape[2:])
        a = self.axis
        q[:, a + 3 * a] = f
        q[:, 9 + a] = -self.direction * cp * f
        return q

    def rate(self, X, t, mat: Material):
        cp = float(mat.cp)
        df = self.dprofile(self._arg(X, t, cp))
        r = np.zeros((X.shape[0], NUM_COMPONENTS) + X.shape[2:])
        a = self.axis
        r[:, a + 3 * a] = -self.direction * cp * df
        r[:, 9 + a] = cp * cp * df
        return r

    def traction(self, mat: Material):
        """Exact boundary traction S n as a boundary callable."""
        cp = float(mat.cp)
        lam, mu = float(mat.lam), float(mat.mu)

        def t_bc(x, t, n):
            f = self.profile(x[self.axis] - self.direction * cp * t)
            n = np.asarray(n, dtype=float)
            out = np.empty((3,) + f.shape)
            for i in range(3):
                s_ii = (lam + 2 * mu) * f if i == self.axis else lam * f
                out[i] = s_ii * n[i]
            return out

        return t_bc


def gaussian_pulse(X, center, width, amplitude=1.0, direction=(1.0, 0.0, 0.0)):
    """Gaussian velocity pulse with zero strain."""
    r2 = sum((X[:, i] - center[i]) ** 2 for i in range(3))
    g = amplitude * np.exp(-r2 / (2 * width**2))
    q = np.zeros((X.shape[0], NUM_COMPONENTS) + X.shape[2:])
    for a in range(3):
        q[:, 9 + a] = direction[a] * g
    return q


def random_state(shape, seed=0, amplitude=1.0):
    """Seeded nodal noise with a symmetric strain."""
    rng = np.random.default_rng(seed)
    q = amplitude * rng.standard_normal(shape)
    for i in range(3):
        for j in range(i + 1, 3):
            q[:, j + 3 * i] = q[:, i + 3 * j]
    return q


TractionFn = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


def _resolve_boundary(boundary):
    kinds = ["free"] * 6
    if boundary is None:
        return kinds
    if isinstance(boundary, str) or callable(boundary):
        kinds = [boundary] * 6
    else:
        kinds = [boundary.get("default", "free")] * 6
        for key, kind in boundary.items():
            if key == "default":
                continue
            if isinstance(key, str) and key not in FACE_NAMES:
                raise ValueError(f"unknown boundary face {key!r}; expected one of {FACE_NAMES}")
            kinds[FACE_NAMES.index(key) if isinstance(key, str) else int(key)] = kind
    for k in kinds:
        if not callable(k) and k != "free":
            raise ValueError(f"unknown boundary kind {k!r}")
    return kinds


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def resolve_threads(threads=None) -> int:
    if threads is None:
        threads = int(os.environ.get("NESTPART_THREADS", "1") or 1)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


@dataclass
class _FaceBatch:
    kernel: str
    face: int
    em: np.ndarray
    ep: np.ndarray
    fp: np.ndarray


class Solver:
    def __init__(
        self,
        mesh: Mesh,
        order: int,
        materials: dict[int, Material],
        boundary=None,
        partition=None,
        threads=None,
    ):
        self.mesh = mesh
        self.order = order
        self.ref = ReferenceElement.create(order)
        self.geom = BrickGeometry(mesh.element_size)
        self.faces = extract_face_mesh(mesh)
        self.threads = resolve_threads(threads)

        ids = mesh.material_ids
        missing = sorted(set(ids.tolist()) - set(materials))
        if missing:
            raise ValueError(f"no material given for material ids {missing}")
        pick = lambda attr: np.array([float(getattr(materials[int(i)], attr)) for i in ids])
        self.mat = Material(pick("rho"), pick("lam"), pick("mu"))
        self.c_max = float(np.max(self.mat.cp))
        self.boundary = _resolve_boundary(boundary)
        self.X = node_coordinates(mesh, self.ref)

        K = mesh.num_elements
        if partition is None:
            self.groups = [np.arange(K)]
            label = np.zeros(K, dtype=np.int64)
            node_of = np.zeros(K, dtype=np.int64)
        else:
            self.groups = [g for _, _, g in partition.groups()]
            label = np.empty(K, dtype=np.int64)
            for gi, g in enumerate(self.groups):
                label[g] = gi
            node_of = partition.node.owner()
        self.partition = partition
        self._mats = [self.mat.take(g) for g in self.groups]

        fm = self.faces
        batches = []
        same_group = label[fm.elem_minus] == label[fm.elem_plus]
        for kernel, mask in (("int_flux", same_group), ("parallel_flux", ~same_group)):
            for f in range(6):
                sel = mask & (fm.face_minus == f)
                if sel.any():
                    batches.append(
                        _FaceBatch(kernel, f, fm.elem_minus[sel], fm.elem_plus[sel], fm.face_plus[sel])
                    )
        self._batches = batches
        self._node_of = node_of

        self._bnd = []
        for f in range(6):
            sel = fm.boundary_face == f
            if sel.any():
                eb = fm.boundary_elem[sel]
                xb = None
                if callable(self.boundary[f]):
                    xb = interp_q(self.X[eb])[:, f].transpose(1, 0, 2, 3)
                self._bnd.append((f, eb, xb))

        self.kernel_times = dict.fromkeys(KERNELS, 0.0)

    # -- helpers -----------------------------------------------------------

    @property
    def num_elements(self):
        return self.mesh.num_elements

    def weights(self):
        """Quadrature weight times Jacobian at every node, (M, M, M)."""
        return self.ref.weights3d() * self.geom.jacobian

    def energy(self, q) -> float:
        s = to_wave_state(q)
        return physics.energy(s, self.mat, self.weights())

    def max_timestep(self, cfl=0.5):
        return cfl_timestep(self.mesh.element_size, self.order, self.c_max, cfl)

    def _tick(self, kernel, t0):
        self.kernel_times[kernel] += time.perf_counter() - t0

    # -- right-hand side ---------------------------------------------------

    def _element_stage(self, gi, q, rate, traces):
        g = self.groups[gi]
        qg = q if len(self.groups) == 1 else q[g]
        t0 = time.perf_counter()
        vol = volume_loop(qg, self.ref, self.geom, self._mats[gi])
        self._tick("volume_loop", t0)
        t0 = time.perf_counter()
        tr = interp_q(qg)
        self._tick("interp_q", t0)
        if len(self.groups) == 1:
            rate[...] = vol
            traces[...] = tr
        else:
            rate[g] = vol
            traces[g] = tr

    def rhs(self, t, q):
        K, C, M = q.shape[0], q.shape[1], self.ref.M
        rate = np.empty_like(q)
        traces = np.empty((K, 6, C, M, M))
        if self.threads > 1 and len(self.groups) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                list(pool.map(lambda gi: self._element_stage(gi, q, rate, traces), range(len(self.groups))))
        else:
            for gi in range(len(self.groups)):
                self._element_stage(gi, q, rate, traces)

        bracket = np.empty_like(traces)
        mat = self.mat
        for b in self._batches:
            t0 = time.perf_counter()
            n = face_normal(b.face)
            qm = to_wave_state(traces[b.em, b.face])
            qp = to_wave_state(traces[b.ep, b.fp])
            mm, mp = mat.take(b.em), mat.take(b.ep)
            bracket[b.em, b.face] = from_wave_state(physics.riemann_flux(qm, qp, mm, mp, n))
            bracket[b.ep, b.fp] = from_wave_state(physics.riemann_flux(qp, qm, mp, mm, -n))
            self._tick(b.kernel, t0)

        for f, eb, xb in self._bnd:
            t0 = time.perf_counter()
            n = face_normal(f)
            qi = to_wave_state(traces[eb, f])
            mb = mat.take(eb)
            kind = self.boundary[f]
            if kind == "free":
                t_bc = np.zeros_like(qi.v)
            else:
                t_bc = kind(xb, t, n)
            bracket[eb, f] = from_wave_state(physics.boundary_flux(qi, mb, n, t_bc))
            self._tick("bound_flux", t0)

        t0 = time.perf_counter()
        for gi, g in enumerate(self.groups):
            if len(self.groups) == 1:
                rate += lift(bracket, self.ref, self.geom)
                rate[:, 9:] /= self.mat.rho[:, None, None, None, None]
            else:
                part = rate[g] + lift(bracket[g], self.ref, self.geom)
                part[:, 9:] /= self.mat.rho[g][:, None, None, None, None]
                rate[g] = part
        self._tick("lift", t0)

        if not np.all(np.isfinite(rate)):
            bad = np.nonzero(~np.isfinite(rate).reshape(K, -1).all(axis=1))[0]
            raise NumericalError(f"non-finite rate in element {int(bad[0])}")
        return rate

    # -- time loop -----------------------------------------------------------

    def step(self, state: State, dt: float) -> State:
        t0 = time.perf_counter()
        before = sum(self.kernel_times[k] for k in KERNELS if k != "rk")
        new = rk_step(state, self.rhs, dt)
        spent = time.perf_counter() - t0
        after = sum(self.kernel_times[k] for k in KERNELS if k != "rk")
        self.kernel_times["rk"] += spent - (after - before)
        return new


@dataclass
class Diagnostics:
    dt: float
    energy: list = field(default_factory=list)  # (step, time, energy)
    kernel_times: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)  # (step, q)


def advance(solver: Solver, state: State, dt: float, steps: int, output_every: int = 0, on_step=None):
    if dt > solver.max_timestep() * (1 + 1e-12):
        warnings.warn(
            f"dt={dt:g} exceeds the CFL limit {solver.max_timestep():g}", CflWarning, stacklevel=2
        )
    diag = Diagnostics(dt)
    diag.energy.append((state.step, state.time, solver.energy(state.q)))
    for _ in range(steps):
        state = solver.step(state, dt)
        diag.energy.append((state.step, state.time, solver.energy(state.q)))
        if output_every and state.step % output_every == 0:
            diag.snapshots.append((state.step, state.q.copy()))
        if on_step is not None:
            on_step(state)
    diag.kernel_times = dict(solver.kernel_times)
    return state, diag


# ---------------------------------------------------------------------------
# Configuration-driven runs
# ---------------------------------------------------------------------------


@dataclass
class SolveConfig:
    order: int
    mesh: MeshConfig
    materials: dict[int, Material]
    steps: int = 118
    dt: float | None = None
    cfl: float = 0.5
    initial: dict = field(default_factory=lambda: {"kind": "zero"})
    boundary: dict | str | None = None
    output_every: int = 0
    seed: int = 0
    nodes: int = 1
    ratio: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.cfl > 0:
            raise ValueError("cfl must be positive")

    @classmethod
    def from_json(cls, data: dict) -> "SolveConfig":
        mats = data.get("materials", {"0": {"rho": 1.0, "cp": 1.0, "cs": 0.0}})
        if isinstance(mats, list):
            mats = {str(i): m for i, m in enumerate(mats)}
        materials = {
            int(k): Material.from_speeds(float(m.get("rho", 1.0)), float(m["cp"]), float(m.get("cs", 0.0)))
            for k, m in mats.items()
        }
        part = data.get("partition", {})
        return cls(
            order=int(data.get("order", 7)),
            mesh=MeshConfig.from_json(data["mesh"]),
            materials=materials,
            steps=int(data.get("steps", 118)),
            dt=data.get("dt"),
            cfl=float(data.get("cfl", 0.5)),
            initial=dict(data.get("initial", {"kind": "zero"})),
            boundary=data.get("boundary"),
            output_every=int(data.get("output_every", 0)),
            seed=int(data.get("seed", 0)),
            nodes=int(part.get("nodes", 1)),
            ratio=part.get("ratio"),
        )


def initial_state(solver: Solver, spec: dict, seed: int = 0) -> np.ndarray:
    kind = spec.get("kind", "zero")
    X = solver.X
    if kind == "zero":
        return np.zeros((solver.num_elements, NUM_COMPONENTS) + X.shape[2:])
    if kind == "plane_wave":
        wave = PlaneWave(**{k: v for k, v in spec.items() if k != "kind"})
        return wave.state(X, 0.0, solver.mat.take(0))
    if kind == "gaussian":
        lo = solver.mesh.element_origins().min(axis=0)
        hi = solver.mesh.element_origins().max(axis=0) + solver.mesh.element_size
        center = spec.get("center", ((lo + hi) / 2).tolist())
        return gaussian_pulse(
            X,
            center,
            float(spec.get("width", 0.1)),
            float(spec.get("amplitude", 1.0)),
            tuple(spec.get("direction", (1.0, 0.0, 0.0))),
        )
    if kind == "random":
        shape = (solver.num_elements, NUM_COMPONENTS) + X.shape[2:]
        return random_state(shape, seed, float(spec.get("amplitude", 1.0)))
    raise ValueError(f"unknown initial condition {kind!r}")


def build_solver(config: SolveConfig, partition=None, threads=None) -> Solver:
    mesh = build_mesh(config.mesh)
    if partition is None and (config.nodes > 1 or config.ratio):
        from .partition import nested_partition, ratio_balancer

        partition = nested_partition(mesh, config.nodes, ratio_balancer(config.ratio or 0.0), config.order)
    return Solver(mesh, config.order, config.materials, config.boundary, partition, threads)


def run(config: SolveConfig, partition=None, threads=None, on_step=None):
    """Advance the configured problem; returns the final State and Diagnostics."""
    solver = build_solver(config, partition, threads)
    q0 = initial_state(solver, config.initial, config.seed)
    dt = config.dt if config.dt is not None else solver.max_timestep(config.cfl)
    state, diag = advance(solver, State(q0), dt, config.steps, config.output_every, on_step)
    diag.kernel_times = dict(solver.kernel_times)
    return state, diag, solver


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def write_energy_csv(path, diag: Diagnostics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time", "energy"])
        for step, t, e in diag.energy:
            w.writerow([step, repr(float(t)), repr(float(e))])


def write_kernel_times_csv(path, diag: Diagnostics, order: int, K: int):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kernel", "N", "K", "seconds"])
        for k in KERNELS:
            w.writerow([k, order, K, f"{diag.kernel_times.get(k, 0.0):.6e}"])


def write_snapshot(path, q: np.ndarray, order: int):
    """Flat binary: magic, u32 version, u32 N, u64 K, then component-major doubles."""
    K = q.shape[0]
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<IIQ", SNAPSHOT_VERSION, order, K))
        fh.write(np.ascontiguousarray(q.transpose(1, 0, 2, 3, 4), dtype="<f8").tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        if fh.read(4) != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a DGAE snapshot")
        version, order, K = struct.unpack("<IIQ", fh.read(16))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        M = order + 1
        data = np.frombuffer(fh.read(), dtype="<f8")
    expected = NUM_COMPONENTS * K * M**3
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {data.size}")
    q = data.reshape(NUM_COMPONENTS, K, M, M, M).transpose(1, 0, 2, 3, 4)
    return order, np.ascontiguousarray(q)


def write_outputs(out_dir, config: SolveConfig, state: State, diag: Diagnostics, solver: Solver):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_energy_csv(out / "energy.csv", diag)
    write_kernel_times_csv(out / "kernel_times.csv", diag, config.order, solver.num_elements)
    for step, q in diag.snapshots:
        write_snapshot(out / f"snapshot_{step:06d}.dgae", q, config.order)
    write_snapshot(out / "final.dgae", state.q, config.order)
