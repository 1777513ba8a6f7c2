"""Two-level nested partitioning.

Level one splices the Morton-ordered element list into equal contiguous
ranges, one per compute node. Level two carves each node range into a
device part, drawn only from elements that share no face with another node,
and a host part holding the rest.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InfeasiblePartitionError
from .mesh import BOUNDARY, Mesh

NUM_COMPONENTS = 12

# (node index, node element count, interior supply) -> requested k_dev
Balancer = Callable[[int, int, int], int]


@dataclass(frozen=True)
class NodePartition:
    ranges: tuple[tuple[int, int], ...]

    @property
    def num_nodes(self):
        return len(self.ranges)

    def sizes(self):
        return [hi - lo for lo, hi in self.ranges]

    def owner(self) -> np.ndarray:
        """Node index of every element."""
        K = self.ranges[-1][1]
        out = np.empty(K, dtype=np.int64)
        for n, (lo, hi) in enumerate(self.ranges):
            out[lo:hi] = n
        return out


def splice(mesh: Mesh, node_count: int) -> NodePartition:
    K = mesh.num_elements
    if node_count <= 0:
        raise ValueError("node_count must be positive")
    if node_count > K:
        raise ValueError(f"node_count {node_count} exceeds element count {K}")
    q, r = divmod(K, node_count)
    ranges = []
    lo = 0
    for n in range(node_count):
        hi = lo + q + (1 if n < r else 0)
        ranges.append((lo, hi))
        lo = hi
    return NodePartition(tuple(ranges))


def interior_elements(mesh: Mesh, part: NodePartition, node: int) -> np.ndarray:
    """Sorted ids of the node's elements whose face neighbours all stay on the node."""
    lo, hi = part.ranges[node]
    nb = mesh.neighbors[lo:hi]
    ok = (nb == BOUNDARY) | ((nb >= lo) & (nb < hi))
    return np.arange(lo, hi)[ok.all(axis=1)]


def _bfs_distances(sources, members, neighbors):
    dist = {s: 0 for s in sources}
    queue = deque(sources)
    while queue:
        e = queue.popleft()
        d = dist[e] + 1
        for nb in neighbors[e]:
            nb = int(nb)
            if nb in members and nb not in dist:
                dist[nb] = d
                queue.append(nb)
    return dist


def growth_order(mesh: Mesh, part: NodePartition, node: int, limit: int | None = None) -> list[int]:
    """Order in which interior elements join the device set.

    The set grown to size k is the first k entries, so one call serves every
    k up to ``limit``.
    """
    interior = interior_elements(mesh, part, node)
    members = set(interior.tolist())
    limit = len(members) if limit is None else min(limit, len(members))
    nbrs = mesh.neighbors

    # rim: interior elements with a face on the node boundary or the domain boundary
    rim = [e for e in interior.tolist() if any(int(n) not in members for n in nbrs[e])]
    depth = _bfs_distances(rim, members, nbrs)

    selected: set[int] = set()
    order: list[int] = []
    while len(order) < limit:
        remaining = [e for e in members if e not in selected]
        # deepest remaining element, smallest id on ties
        seed = min(remaining, key=lambda e: (-depth.get(e, 0), e))
        hops = _bfs_distances([seed], members - selected, nbrs)
        count = {seed: 0}
        heap = [(0, 0, seed)]
        while heap and len(order) < limit:
            neg, d, e = heapq.heappop(heap)
            if e in selected or -neg != count[e]:
                continue
            selected.add(e)
            order.append(e)
            for nb in nbrs[e]:
                nb = int(nb)
                if nb in members and nb not in selected:
                    count[nb] = count.get(nb, 0) + 1
                    heapq.heappush(heap, (-count[nb], hops.get(nb, 0), nb))
    return order


def grow_device_set(mesh: Mesh, part: NodePartition, node: int, k_dev: int) -> np.ndarray:
    supply = len(interior_elements(mesh, part, node))
    if k_dev < 0:
        raise ValueError("k_dev must be non-negative")
    if k_dev > supply:
        raise InfeasiblePartitionError(k_dev, supply, node)
    if k_dev == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.array(growth_order(mesh, part, node, k_dev), dtype=np.int64))


def shared_faces(mesh: Mesh, device: np.ndarray) -> np.ndarray:
    """Faces between device elements and non-device neighbours, shape (S, 4).

    Rows are (device elem, face, other elem, other face) in global face order.
    """
    if len(device) == 0:
        return np.empty((0, 4), dtype=np.int64)
    mask = np.zeros(mesh.num_elements, dtype=bool)
    mask[device] = True
    nb = mesh.neighbors[device]
    cross = (nb != BOUNDARY) & ~mask[np.where(nb == BOUNDARY, 0, nb)]
    rows, faces = np.nonzero(cross)
    elems = device[rows]
    return np.stack(
        [elems, faces, nb[rows, faces], mesh.neighbor_faces[device][rows, faces]], axis=1
    ).astype(np.int64)


def surface_faces(mesh: Mesh, device) -> int:
    return len(shared_faces(mesh, np.asarray(device, dtype=np.int64)))


# ---------------------------------------------------------------------------
# Balancers
# ---------------------------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def ratio_balancer(ratio: float) -> Balancer:
    """K_dev = round(K * r / (1 + r)) for a device/host element ratio r."""
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    return lambda node, K, supply: round_half_up(K * ratio / (1.0 + ratio))


def fraction_balancer(fraction: float) -> Balancer:
    """K_dev = round(K * f) for a device work fraction f in [0, 1]."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    return lambda node, K, supply: round_half_up(K * fraction)


def model_balancer(table, order: int, xfer=None) -> Balancer:
    """K_dev from the calibrated load-balance solver."""
    from .perfmodel import balance

    return lambda node, K, supply: balance(order, K, table, xfer).k_dev


# ---------------------------------------------------------------------------
# Nested partition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeStats:
    node: int
    K: int
    K_dev: int
    K_host: int
    surface_faces: int
    transfer_dof: int
    requested: int
    interior: int
    clamped: bool


@dataclass(frozen=True, eq=False)
class NestedPartition:
    node: NodePartition
    device_sets: tuple[np.ndarray, ...]
    host_sets: tuple[np.ndarray, ...]
    shared_faces: tuple[np.ndarray, ...]
    stats: tuple[NodeStats, ...]
    order: int = 7
    _owner: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_nodes(self):
        return self.node.num_nodes

    @property
    def clamped(self):
        return any(s.clamped for s in self.stats)

    def groups(self):
        """(node, on_device, element ids) for every non-empty element set."""
        out = []
        for n in range(self.num_nodes):
            if len(self.host_sets[n]):
                out.append((n, False, self.host_sets[n]))
            if len(self.device_sets[n]):
                out.append((n, True, self.device_sets[n]))
        return out

    def to_json(self) -> dict:
        return {
            "order": self.order,
            "nodes": [
                {"range": [lo, hi], "device_elems": self.device_sets[n].tolist()}
                for n, (lo, hi) in enumerate(self.node.ranges)
            ],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    def write_stats_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node", "K", "K_dev", "surface_faces", "transfer_dof"])
            for s in self.stats:
                w.writerow([s.node, s.K, s.K_dev, s.surface_faces, s.transfer_dof])


def transfer_dof(num_shared: int, order: int) -> int:
    """State values crossing the host/device boundary per step, both directions."""
    return 2 * num_shared * (order + 1) ** 2 * NUM_COMPONENTS


def _assemble(mesh, part, device_sets, requested, order):
    host_sets, faces, stats = [], [], []
    for n, (lo, hi) in enumerate(part.ranges):
        dev = device_sets[n]
        mask = np.zeros(hi - lo, dtype=bool)
        mask[dev - lo] = True
        host_sets.append(np.arange(lo, hi)[~mask])
        sf = shared_faces(mesh, dev)
        faces.append(sf)
        supply = len(interior_elements(mesh, part, n))
        stats.append(
            NodeStats(
                node=n,
                K=hi - lo,
                K_dev=len(dev),
                K_host=hi - lo - len(dev),
                surface_faces=len(sf),
                transfer_dof=transfer_dof(len(sf), order),
                requested=requested[n],
                interior=supply,
                clamped=requested[n] > supply,
            )
        )
    return NestedPartition(part, tuple(device_sets), tuple(host_sets), tuple(faces), tuple(stats), order)


def nested_partition(mesh: Mesh, node_count: int, balancer: Balancer, order: int = 7) -> NestedPartition:
    part = splice(mesh, node_count)
    device_sets, requested = [], []
    for n, (lo, hi) in enumerate(part.ranges):
        supply = len(interior_elements(mesh, part, n))
        want = int(balancer(n, hi - lo, supply))
        if want < 0:
            raise ValueError(f"balancer returned negative k_dev for node {n}")
        requested.append(want)
        device_sets.append(grow_device_set(mesh, part, n, min(want, supply)))
    return _assemble(mesh, part, device_sets, requested, order)


def partition_from_json(mesh: Mesh, data: dict, order: int | None = None) -> NestedPartition:
    """Rebuild a partition (shared faces and stats included) from its JSON form."""
    nodes = data["nodes"]
    ranges = tuple((int(n["range"][0]), int(n["range"][1])) for n in nodes)
    K = mesh.num_elements
    if not ranges or ranges[0][0] != 0 or ranges[-1][1] != K:
        raise ValueError("node ranges must cover the whole mesh")
    for (a, b), (c, _) in zip(ranges, ranges[1:]):
        if b != c:
            raise ValueError("node ranges must be contiguous")
    part = NodePartition(ranges)
    device_sets = []
    for n, node in enumerate(nodes):
        dev = np.array(sorted(set(int(e) for e in node.get("device_elems", []))), dtype=np.int64)
        interior = set(interior_elements(mesh, part, n).tolist())
        bad = [int(e) for e in dev if int(e) not in interior]
        if bad:
            raise ValueError(f"node {n}: device elements {bad[:5]} are not interior")
        device_sets.append(dev)
    order = int(data.get("order", 7)) if order is None else order
    return _assemble(mesh, part, device_sets, [len(d) for d in device_sets], order)


def load_partition(mesh: Mesh, path, order=None) -> NestedPartition:
    with open(path) as fh:
        return partition_from_json(mesh, json.load(fh), order)


def host_only(mesh: Mesh, node_count: int, order: int = 7) -> NestedPartition:
    return nested_partition(mesh, node_count, fraction_balancer(0.0), order)


def with_device_sets(mesh: Mesh, part: NodePartition, k_devs, order: int = 7) -> NestedPartition:
    """Nested partition with explicit per-node device counts (strict feasibility)."""
    device_sets = [grow_device_set(mesh, part, n, int(k)) for n, k in enumerate(k_devs)]
    return _assemble(mesh, part, device_sets, [int(k) for k in k_devs], order)
