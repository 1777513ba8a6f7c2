"""Isotropic elastic-acoustic media in strain-velocity form.

Tensors are stored component-first so every routine broadcasts over any
trailing node axes: a strain is ``(3, 3, ...)``, a velocity ``(3, ...)``,
a normal ``(3,)`` or ``(3, ...)``. All arithmetic is elementwise in a fixed
order, which keeps results independent of how the caller batches faces.

Interface conventions: the minus side is the element being updated and
``n`` is its outward unit normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Material:
    rho: float
    lam: float
    mu: float

    def __post_init__(self):
        rho, lam, mu = (np.asarray(x) for x in (self.rho, self.lam, self.mu))
        if np.any(rho <= 0):
            raise ValueError("density must be positive")
        if np.any(mu < 0):
            raise ValueError("shear modulus must be non-negative")
        if np.any(lam + 2 * mu <= 0):
            raise ValueError("lambda + 2 mu must be positive")

    @classmethod
    def from_speeds(cls, rho, cp, cs):
        mu = rho * cs**2
        return cls(rho, rho * cp**2 - 2 * mu, mu)

    @property
    def cp(self):
        return np.sqrt((self.lam + 2 * self.mu) / self.rho)

    @property
    def cs(self):
        return np.sqrt(self.mu / self.rho)

    @property
    def is_acoustic(self):
        return np.all(np.asarray(self.mu) == 0)

    def take(self, index):
        """Per-element material arrays indexed by ``index``."""
        return Material(
            np.asarray(self.rho)[index], np.asarray(self.lam)[index], np.asarray(self.mu)[index]
        )


@dataclass(frozen=True)
class WaveState:
    E: np.ndarray  # (3, 3, ...)
    v: np.ndarray  # (3, ...)

    def __post_init__(self):
        E = np.asarray(self.E, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if E.shape[:2] != (3, 3) or v.shape[0] != 3:
            raise ValueError("strain must be (3, 3, ...) and velocity (3, ...)")
        object.__setattr__(self, "E", 0.5 * (E + E.swapaxes(0, 1)))
        object.__setattr__(self, "v", v)


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return np.stack(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


def _matvec(S, n):
    return np.stack([S[i, 0] * n[0] + S[i, 1] * n[1] + S[i, 2] * n[2] for i in range(3)])


def _sym_outer(a, b):
    return np.stack([np.stack([0.5 * (a[i] * b[j] + b[i] * a[j]) for j in range(3)]) for i in range(3)])


def _outer(a, b):
    return np.stack([np.stack([a[i] * b[j] for j in range(3)]) for i in range(3)])


def _bcast(x, like):
    """Reshape a material array of shape (F,) to broadcast against (F, ...)."""
    x = np.asarray(x, dtype=float)
    return x.reshape(x.shape + (1,) * (like.ndim - x.ndim)) if x.ndim else x


def constitutive(mat: Material, E):
    """Stress S = lambda tr(E) I + 2 mu E."""
    E = np.asarray(E, dtype=float)
    tail = E[0, 0]
    lam, mu = _bcast(mat.lam, tail), _bcast(mat.mu, tail)
    tr = E[0, 0] + E[1, 1] + E[2, 2]
    S = np.empty(np.broadcast_shapes(E.shape, (3, 3) + np.shape(lam * tr)))
    for i in range(3):
        for j in range(3):
            S[i, j] = 2 * mu * E[i, j] + (lam * tr if i == j else 0.0)
    return S


def flux(state: WaveState, mat: Material, i: int) -> WaveState:
    """Physical flux along axis ``i`` (0-based): (-sym(v x e_i), -S e_i)."""
    if i not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    e = np.zeros(3)
    e[i] = 1.0
    e = e.reshape((3,) + (1,) * (state.v.ndim - 1))
    Ef = -0.5 * (_outer(state.v, e) + _outer(e, state.v))
    S = constitutive(mat, state.E)
    return WaveState(Ef, -S[:, i])


@dataclass(frozen=True)
class InterfaceJumps:
    traction: np.ndarray  # [[CE]] = S^- n - S^+ n
    normal_velocity: np.ndarray  # [[v]] = v^- . n - v^+ . n
    velocity: np.ndarray  # {{v}} = v^- - v^+


def interface_jumps(qm: WaveState, qp: WaveState, matm: Material, matp: Material, n) -> InterfaceJumps:
    n = np.asarray(n, dtype=float)
    Sm = constitutive(matm, qm.E)
    Sp = constitutive(matp, qp.E)
    return InterfaceJumps(
        _matvec(Sm, n) - _matvec(Sp, n),
        _dot(qm.v, n) - _dot(qp.v, n),
        qm.v - qp.v,
    )


def upwind_bracket(jumps: InterfaceJumps, matm: Material, matp: Material, n) -> WaveState:
    """n . [(Fq)* - Fq] for the strain and velocity equations."""
    n = np.asarray(n, dtype=float)
    like = jumps.normal_velocity
    rho_m, rho_p = _bcast(matm.rho, like), _bcast(matp.rho, like)
    zp_m = rho_m * _bcast(matm.cp, like)
    zp_p = rho_p * _bcast(matp.cp, like)
    zs_m = rho_m * _bcast(matm.cs, like)
    zs_p = rho_p * _bcast(matp.cs, like)
    mu_m = _bcast(matm.mu, like)

    k0 = 1.0 / (zp_m + zp_p)
    shear = mu_m != 0
    k1 = np.where(shear, 1.0 / np.where(shear, zs_m + zs_p, 1.0), 0.0)

    jS = jumps.traction
    common = k0 * _dot(n, jS) + k0 * zp_p * jumps.normal_velocity
    tS = _cross(n, _cross(n, jS))
    tv = _cross(n, _cross(n, jumps.velocity))
    nn = n if n.ndim > 1 else n.reshape((3,) + (1,) * like.ndim)

    strain = (
        common * _outer(nn, nn)
        - k1 * _sym_outer(nn, tS)
        - k1 * zs_p * _sym_outer(nn, tv)
    )
    velocity = common * zp_m * nn - k1 * zs_m * tS - k1 * zs_p * zs_m * tv
    return WaveState(strain, velocity)


def riemann_flux(qm: WaveState, qp: WaveState, matm: Material, matp: Material, n) -> WaveState:
    return upwind_bracket(interface_jumps(qm, qp, matm, matp, n), matm, matp, n)


def traction_bc(q_interior: WaveState, mat: Material, n, t_bc) -> InterfaceJumps:
    """Mirror-principle jumps for a prescribed boundary traction.

    Velocity jumps vanish and the traction jump is -2 (t_bc - S^- n).
    """
    n = np.asarray(n, dtype=float)
    Sn = _matvec(constitutive(mat, q_interior.E), n)
    jS = -2.0 * (np.asarray(t_bc, dtype=float) - Sn)
    zero = np.zeros_like(jS[0])
    return InterfaceJumps(jS, zero, np.zeros_like(jS))


def boundary_flux(q_interior: WaveState, mat: Material, n, t_bc) -> WaveState:
    return upwind_bracket(traction_bc(q_interior, mat, n, t_bc), mat, mat, n)


def interior_traction(q_interior: WaveState, mat: Material, n):
    return _matvec(constitutive(mat, q_interior.E), np.asarray(n, dtype=float))


def energy_density(state: WaveState, mat: Material):
    """1/2 rho |v|^2 + 1/2 E : CE at every node."""
    like = state.v[0]
    S = constitutive(mat, state.E)
    kinetic = 0.5 * _bcast(mat.rho, like) * _dot(state.v, state.v)
    strain = 0.5 * sum(state.E[i, j] * S[i, j] for i in range(3) for j in range(3))
    return kinetic + strain


def energy(state: WaveState, mat: Material, weights) -> float:
    """Total energy; ``weights`` carries quadrature weights times Jacobians."""
    return float(np.sum(energy_density(state, mat) * weights))
