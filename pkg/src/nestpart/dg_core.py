"""Reference-element machinery and the element-local dG kernels.

Element fields are laid out ``(K, 12, M, M, M)`` with ``M = N + 1`` and the
node axes ordered ``(r3, r2, r1)`` so that r1 varies fastest. Components
0..8 hold the strain, entry (i, j) at index ``i + 3 j``; 9..11 hold the
velocity.

The tensor kernels accumulate one column of the 1-D operator at a time with
plain elementwise multiply/add. That fixes the summation order per node, so
an element's result does not depend on which batch it was evaluated in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError

NUM_COMPONENTS = 12
STRAIN = [[i + 3 * j for j in range(3)] for i in range(3)]
VELOCITY = [9, 10, 11]


def lgl_nodes_weights(N: int, tol: float = 1e-15, maxiter: int = 100):
    """Legendre-Gauss-Lobatto nodes and weights on [-1, 1] (N + 1 points)."""
    if not 1 <= N <= 15:
        raise ValueError(f"order N={N} outside 1..15")
    x = -np.cos(np.pi * np.arange(N + 1) / N)
    P = np.zeros((N + 1, N + 1))
    for _ in range(maxiter):
        P[:, 0] = 1.0
        P[:, 1] = x
        for k in range(2, N + 1):
            P[:, k] = ((2 * k - 1) * x * P[:, k - 1] - (k - 1) * P[:, k - 2]) / k
        step = (x * P[:, N] - P[:, N - 1]) / ((N + 1) * P[:, N])
        x = x - step
        if np.max(np.abs(step)) < tol:
            break
    x = 0.5 * (x - x[::-1])
    x[0], x[-1] = -1.0, 1.0
    if N % 2 == 0:
        x[N // 2] = 0.0
    PN = np.polynomial.legendre.legval(x, np.eye(N + 1)[N])
    w = 2.0 / (N * (N + 1) * PN**2)
    return x, w


def derivative_matrix(x):
    """D[l, m] = l_m'(x_l) for the Lagrange basis on nodes ``x``."""
    x = np.asarray(x, dtype=float)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    bary = 1.0 / np.prod(diff, axis=1)
    D = (bary[None, :] / bary[:, None]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


def lagrange_eval(x, xi):
    """Matrix L[p, m] = l_m(xi_p)."""
    x = np.asarray(x, dtype=float)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    L = np.ones((len(xi), len(x)))
    for m in range(len(x)):
        for k in range(len(x)):
            if k != m:
                L[:, m] *= (xi - x[k]) / (x[m] - x[k])
    return L


def _face_maps(M):
    idx = np.arange(M**3).reshape(M, M, M)  # [r3, r2, r1]
    faces = [idx[:, :, 0], idx[:, :, -1], idx[:, 0, :], idx[:, -1, :], idx[0, :, :], idx[-1, :, :]]
    return np.stack([f.reshape(-1) for f in faces])


@dataclass(frozen=True, eq=False)
class ReferenceElement:
    N: int
    nodes: np.ndarray
    weights: np.ndarray
    D: np.ndarray
    face_node_maps: np.ndarray  # (6, M*M) flat volume indices, r1 fastest

    @classmethod
    def create(cls, N: int) -> "ReferenceElement":
        x, w = lgl_nodes_weights(N)
        return cls(N, x, w, derivative_matrix(x), _face_maps(N + 1))

    @property
    def M(self):
        return self.N + 1

    def weights3d(self):
        w = self.weights
        return w[:, None, None] * w[None, :, None] * w[None, None, :]


@dataclass(frozen=True)
class BrickGeometry:
    """Affine map of the reference cube onto an axis-aligned cube of edge h."""

    h: float

    @property
    def jacobian(self):
        return (0.5 * self.h) ** 3

    @property
    def metric(self):
        """dr/dx, i.e. J a^i / J along each axis."""
        return 2.0 / self.h

    @property
    def face_scale(self):
        """Face Jacobian over volume Jacobian."""
        return 2.0 / self.h


def _check(D, u, axis):
    M = D.shape[0]
    if D.shape != (M, M) or u.ndim < 3 or u.shape[-3:] != (M, M, M):
        raise ValueError(f"operator {D.shape} does not match element tensor {u.shape}")


def iiax(D, u):
    """Apply D along r1 (last axis): (I x I x D) u."""
    _check(D, u, -1)
    out = u[..., 0:1] * D[:, 0]
    for m in range(1, D.shape[0]):
        out += u[..., m : m + 1] * D[:, m]
    return out


def iaix(D, u):
    """Apply D along r2: (I x D x I) u."""
    _check(D, u, -2)
    col = D[:, :, None]
    out = u[..., 0:1, :] * col[:, 0]
    for m in range(1, D.shape[0]):
        out += u[..., m : m + 1, :] * col[:, m]
    return out


def aiix(D, u):
    """Apply D along r3: (D x I x I) u."""
    _check(D, u, -3)
    col = D[:, :, None, None]
    out = u[..., 0:1, :, :] * col[:, 0]
    for m in range(1, D.shape[0]):
        out += u[..., m : m + 1, :, :] * col[:, m]
    return out


AXIS_APPLY = (iiax, iaix, aiix)


def _per_element(x, q):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x
    return x.reshape((-1, 1, 1, 1))


def volume_loop(q, ref: ReferenceElement, geom: BrickGeometry, mat):
    """Volume contribution to Q dq/dt, i.e. -div(F q) at every node.

    ``mat`` holds scalars or per-element arrays of shape (K,). The velocity
    rows still carry the density factor; divide by rho to get dq/dt.
    """
    D, g = ref.D, geom.metric
    lam, mu = _per_element(mat.lam, q), _per_element(mat.mu, q)
    E = [[q[:, STRAIN[i][j]] for j in range(3)] for i in range(3)]
    v = [q[:, VELOCITY[a]] for a in range(3)]

    grad = [[AXIS_APPLY[i](D, v[a]) for i in range(3)] for a in range(3)]
    tr = E[0][0] + E[1][1] + E[2][2]

    out = np.empty_like(q)
    for i in range(3):
        for j in range(3):
            out[:, STRAIN[i][j]] = g * (0.5 * (grad[i][j] + grad[j][i]))
    for a in range(3):
        acc = None
        for i in range(3):
            S_ai = 2.0 * mu * E[a][i] + (lam * tr if a == i else 0.0)
            term = AXIS_APPLY[i](D, S_ai)
            acc = term if acc is None else acc + term
        out[:, VELOCITY[a]] = g * acc
    return out


def interp_q(q, ref: ReferenceElement | None = None):
    """Face traces, shape (K, 6, C, M, M); a gather since LGL includes the endpoints.

    Tangential axes keep volume order, so matching faces of two neighbouring
    elements line up node for node.
    """
    return np.stack(
        [
            q[..., :, :, 0],
            q[..., :, :, -1],
            q[..., :, 0, :],
            q[..., :, -1, :],
            q[..., 0, :, :],
            q[..., -1, :, :],
        ],
        axis=1,
    )


def lift(face_flux, ref: ReferenceElement, geom: BrickGeometry):
    """Surface contribution to Q dq/dt from per-face Riemann brackets.

    ``face_flux`` is (K, 6, C, M, M) holding n . [(Fq)* - Fq]. With LGL
    collocation the surface quadrature lands on boundary nodes only, scaled
    by the face/volume Jacobian ratio over the end-point weight.
    """
    K, _, C, M, _ = face_flux.shape
    coef = geom.face_scale / ref.weights[0]
    out = np.zeros((K, C, M, M, M))
    out[..., :, :, 0] -= coef * face_flux[:, 0]
    out[..., :, :, -1] -= coef * face_flux[:, 1]
    out[..., :, 0, :] -= coef * face_flux[:, 2]
    out[..., :, -1, :] -= coef * face_flux[:, 3]
    out[..., 0, :, :] -= coef * face_flux[:, 4]
    out[..., -1, :, :] -= coef * face_flux[:, 5]
    return out


@dataclass
class State:
    q: np.ndarray
    time: float = 0.0
    step: int = 0


RateFn = Callable[[float, np.ndarray], np.ndarray]


def _finite(x, step, stage):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values at step {step}, stage {stage}")


def rk_step(state: State, rate_fn: RateFn, dt: float) -> State:
    """One classic four-stage Runge-Kutta step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    q, t = state.q, state.time
    k1 = rate_fn(t, q)
    _finite(k1, state.step, 1)
    k2 = rate_fn(t + 0.5 * dt, q + (0.5 * dt) * k1)
    _finite(k2, state.step, 2)
    k3 = rate_fn(t + 0.5 * dt, q + (0.5 * dt) * k2)
    _finite(k3, state.step, 3)
    k4 = rate_fn(t + dt, q + dt * k3)
    _finite(k4, state.step, 4)
    q_new = q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _finite(q_new, state.step, 5)
    return State(q_new, t + dt, state.step + 1)


def cfl_timestep(h: float, N: int, c_max: float, cfl: float = 0.5) -> float:
    """dt = C h / (c_max N^2)."""
    return cfl * h / (c_max * N**2)
