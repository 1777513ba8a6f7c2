"""Morton-ordered hexahedral forests of abutting bricks.

Every tree is a cube refined uniformly to ``level``; elements are numbered
tree-major and Morton-minor, so contiguous id ranges are compact regions.

Faces are numbered ``0..5`` as (-x, +x, -y, +y, -z, +z); the face opposite
to ``f`` is ``f ^ 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import MeshError

MAX_LEVEL = 20
BOUNDARY = -1

FACE_AXIS = (0, 0, 1, 1, 2, 2)
FACE_SIGN = (-1, 1, -1, 1, -1, 1)
FACE_OFFSETS = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]],
    dtype=np.int64,
)


def face_normal(face):
    n = np.zeros(3)
    n[FACE_AXIS[face]] = FACE_SIGN[face]
    return n


# ---------------------------------------------------------------------------
# Morton keys
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class MortonKey:
    code: int
    level: int

    def __post_init__(self):
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level {self.level} outside 0..{MAX_LEVEL}")
        if not 0 <= self.code < (1 << (3 * self.level)):
            raise ValueError(f"code {self.code} needs more than {3 * self.level} bits")


def _spread(v):
    # 21-bit value -> every third bit of a 63-bit word
    v &= 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


def _compact(v):
    v &= 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


def morton_encode(x: int, y: int, z: int, level: int) -> MortonKey:
    """Interleave coordinate bits; x takes the lowest bit of every triple."""
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"level {level} outside 0..{MAX_LEVEL}")
    side = 1 << level
    for name, c in (("x", x), ("y", y), ("z", z)):
        if not 0 <= c < side:
            raise ValueError(f"{name}={c} does not fit in level {level}")
    return MortonKey(_spread(x) | (_spread(y) << 1) | (_spread(z) << 2), level)


def morton_decode(key: MortonKey) -> tuple[int, int, int]:
    c = key.code
    return _compact(c), _compact(c >> 1), _compact(c >> 2)


def morton_decode_array(codes):
    """Vectorised decode of an integer array of codes into an (n, 3) array."""
    c = np.asarray(codes, dtype=np.uint64)
    out = np.empty(c.shape + (3,), dtype=np.int64)
    for axis in range(3):
        out[..., axis] = _compact(c >> np.uint64(axis)).astype(np.int64)
    return out


# ---------------------------------------------------------------------------
# Forest description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeSpec:
    origin: tuple[float, float, float]
    material_id: int = 0


@dataclass(frozen=True)
class MeshConfig:
    trees: tuple[TreeSpec, ...]
    level: int
    element_size: float | None = None

    @property
    def h(self) -> float:
        return self.element_size if self.element_size is not None else 2.0**-self.level

    @property
    def tree_size(self) -> float:
        return self.h * (1 << self.level)

    @classmethod
    def brick(cls, level, material_id=0):
        return cls((TreeSpec((0.0, 0.0, 0.0), material_id),), level)

    @classmethod
    def from_json(cls, data: dict) -> "MeshConfig":
        trees = tuple(
            TreeSpec(tuple(float(c) for c in t["origin"]), int(t.get("material_id", 0)))
            for t in data["trees"]
        )
        size = data.get("element_size")
        return cls(trees, int(data["level"]), None if size is None else float(size))

    def to_json(self) -> dict:
        return {
            "trees": [
                {"origin": list(t.origin), "material_id": t.material_id} for t in self.trees
            ],
            "level": self.level,
            "element_size": self.h,
        }


@dataclass(frozen=True, eq=False)
class Mesh:
    config: MeshConfig
    tree_ids: np.ndarray  # (K,)
    codes: np.ndarray  # (K,) Morton code within the tree
    coords: np.ndarray  # (K, 3) integer lattice coordinates, global
    neighbors: np.ndarray  # (K, 6) neighbour id or BOUNDARY
    neighbor_faces: np.ndarray  # (K, 6) neighbour's face index or BOUNDARY
    origin: np.ndarray = field(repr=False)  # physical position of lattice point 0

    @property
    def trees(self):
        return self.config.trees

    @property
    def level(self):
        return self.config.level

    @property
    def element_size(self):
        return self.config.h

    @property
    def num_elements(self):
        return len(self.tree_ids)

    @property
    def material_ids(self):
        mats = np.array([t.material_id for t in self.config.trees], dtype=np.int64)
        return mats[self.tree_ids]

    def element_origins(self):
        """Physical coordinates of each element's lower corner, shape (K, 3)."""
        return self.origin + self.coords * self.element_size

    def to_json(self) -> dict:
        return self.config.to_json()

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")


def _tree_lattice(config: MeshConfig) -> np.ndarray:
    origins = np.array([t.origin for t in config.trees], dtype=float)
    rel = (origins - origins[0]) / config.tree_size
    lattice = np.rint(rel).astype(np.int64)
    if not np.allclose(rel, lattice, atol=1e-9):
        raise MeshError("tree origins must lie on a lattice of the tree edge length")
    return lattice


def _check_forest(lattice: np.ndarray):
    seen = {}
    for i, p in enumerate(map(tuple, lattice)):
        if p in seen:
            raise MeshError(f"trees {seen[p]} and {i} overlap")
        seen[p] = i
    if len(lattice) == 1:
        return
    reached = {tuple(lattice[0])}
    stack = [tuple(lattice[0])]
    while stack:
        p = stack.pop()
        for off in FACE_OFFSETS:
            q = tuple(int(a + b) for a, b in zip(p, off))
            if q in seen and q not in reached:
                reached.add(q)
                stack.append(q)
    if len(reached) != len(lattice):
        missing = sorted(seen[p] for p in seen if p not in reached)
        raise MeshError(f"forest is not face-connected; trees {missing} do not abut the rest")


def build_mesh(config: MeshConfig) -> Mesh:
    if not 1 <= len(config.trees) <= 8:
        raise MeshError(f"forest needs 1..8 trees, got {len(config.trees)}")
    if not 0 <= config.level <= MAX_LEVEL:
        raise MeshError(f"level {config.level} outside 0..{MAX_LEVEL}")
    if config.h <= 0:
        raise MeshError("element_size must be positive")
    lattice = _tree_lattice(config)
    _check_forest(lattice)

    per_tree = 1 << (3 * config.level)
    side = 1 << config.level
    ntrees = len(config.trees)
    local = morton_decode_array(np.arange(per_tree))
    tree_ids = np.repeat(np.arange(ntrees, dtype=np.int64), per_tree)
    codes = np.tile(np.arange(per_tree, dtype=np.int64), ntrees)
    coords = (lattice[:, None, :] * side + local[None, :, :]).reshape(-1, 3)
    K = len(tree_ids)

    lo = coords.min(axis=0)
    shape = coords.max(axis=0) - lo + 1
    grid = np.full(tuple(shape), BOUNDARY, dtype=np.int64)
    rel = coords - lo
    grid[rel[:, 0], rel[:, 1], rel[:, 2]] = np.arange(K)

    neighbors = np.full((K, 6), BOUNDARY, dtype=np.int64)
    neighbor_faces = np.full((K, 6), BOUNDARY, dtype=np.int64)
    for f in range(6):
        p = rel + FACE_OFFSETS[f]
        inside = np.all((p >= 0) & (p < shape), axis=1)
        nb = np.full(K, BOUNDARY, dtype=np.int64)
        nb[inside] = grid[p[inside, 0], p[inside, 1], p[inside, 2]]
        neighbors[:, f] = nb
        neighbor_faces[:, f] = np.where(nb != BOUNDARY, f ^ 1, BOUNDARY)

    origin = np.asarray(config.trees[0].origin, dtype=float)
    return Mesh(config, tree_ids, codes, coords, neighbors, neighbor_faces, origin)


def load_mesh(path) -> Mesh:
    with open(path) as fh:
        return build_mesh(MeshConfig.from_json(json.load(fh)))


# ---------------------------------------------------------------------------
# Face mesh
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FaceMesh:
    """Interior faces listed once (lower element id on the minus side)."""

    elem_minus: np.ndarray
    face_minus: np.ndarray
    elem_plus: np.ndarray
    face_plus: np.ndarray
    boundary_elem: np.ndarray
    boundary_face: np.ndarray
    boundary_normal: np.ndarray  # (B, 3)

    @property
    def faces(self):
        return list(
            zip(
                self.elem_minus.tolist(),
                self.face_minus.tolist(),
                self.elem_plus.tolist(),
                self.face_plus.tolist(),
            )
        )

    @property
    def boundary_faces(self):
        return [
            (int(e), int(f), tuple(n))
            for e, f, n in zip(self.boundary_elem, self.boundary_face, self.boundary_normal)
        ]

    @property
    def num_interior(self):
        return len(self.elem_minus)

    @property
    def num_boundary(self):
        return len(self.boundary_elem)


def extract_face_mesh(mesh: Mesh) -> FaceMesh:
    K = mesh.num_elements
    e = np.repeat(np.arange(K, dtype=np.int64), 6)
    f = np.tile(np.arange(6, dtype=np.int64), K)
    nb = mesh.neighbors.reshape(-1)
    nf = mesh.neighbor_faces.reshape(-1)

    # (e, f) is already in global face-id order
    inner = (nb != BOUNDARY) & (e < nb)
    bnd = nb == BOUNDARY
    normals = np.array([face_normal(k) for k in range(6)])
    return FaceMesh(
        elem_minus=e[inner],
        face_minus=f[inner],
        elem_plus=nb[inner],
        face_plus=nf[inner],
        boundary_elem=e[bnd],
        boundary_face=f[bnd],
        boundary_normal=normals[f[bnd]],
    )


def brick_config(trees: Sequence[tuple[Sequence[float], int]], level: int, element_size=None):
    """Convenience constructor: ``[((x, y, z), material_id), ...]``."""
    return MeshConfig(
        tuple(TreeSpec(tuple(float(c) for c in o), int(m)) for o, m in trees),
        level,
        element_size,
    )
