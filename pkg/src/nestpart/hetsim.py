"""Discrete-event model of the host/accelerator execution flow.

Per step and node the host runs its kernels and then the two shared-face
transfers, while the device runs its kernels concurrently. The two meet at
one synchronisation point, nodes then exchange inter-node faces, and a
global barrier closes the step. A single bulk transfer of the device state
follows the last step.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field

import numpy as np

from .mesh import BOUNDARY, Mesh
from .partition import NUM_COMPONENTS, NestedPartition
from .perfmodel import (
    BYTES_PER_VALUE,
    KERNELS,
    DeviceProfile,
    KernelTimeTable,
    StepPrediction,
    TransferModel,
    apply_profile,
    face_bytes,
    step_prediction,
)

__all__ = [
    "DeviceProfile",
    "NetworkModel",
    "SimScenario",
    "SimTrace",
    "simulate",
    "compare_strategies",
    "STRATEGIES",
    "predict_scenario",
    "validate_model",
]


@dataclass(frozen=True)
class NetworkModel:
    """Inter-node link: alpha + beta * bytes per message."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("network alpha and beta must be non-negative")

    def message(self, nbytes):
        return self.alpha + self.beta * nbytes


def node_pair_faces(mesh: Mesh, partition: NestedPartition) -> dict:
    """Faces shared by each pair of nodes, keyed (lower node, higher node)."""
    owner = partition.node.owner()
    nb = mesh.neighbors
    e, f = np.nonzero((nb != BOUNDARY) & (nb > np.arange(mesh.num_elements)[:, None]))
    a, b = owner[e], owner[nb[e, f]]
    cross = a != b
    pairs = {}
    for x, y in zip(a[cross].tolist(), b[cross].tolist()):
        key = (min(x, y), max(x, y))
        pairs[key] = pairs.get(key, 0) + 1
    return dict(sorted(pairs.items()))


@dataclass
class SimScenario:
    mesh: Mesh
    partition: NestedPartition
    order: int
    steps: int
    table: KernelTimeTable
    profiles: list | DeviceProfile | None = None
    network: NetworkModel = field(default_factory=NetworkModel)

    def __post_init__(self):
        if self.partition.node.ranges[-1][1] != self.mesh.num_elements:
            raise ValueError("partition does not match the mesh element count")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if isinstance(self.profiles, DeviceProfile):
            self.profiles = [self.profiles] * self.partition.num_nodes
        if self.profiles is not None and len(self.profiles) != self.partition.num_nodes:
            raise ValueError("need one device profile per node")

    @property
    def num_nodes(self):
        return self.partition.num_nodes

    def node_table(self, node: int) -> KernelTimeTable:
        """Table for one node: device rows from its profile when one is given."""
        if self.profiles is None:
            return self.table
        return apply_profile(self.table, self.profiles[node])

    def node_transfer(self, node: int) -> TransferModel:
        return self.node_table(node).transfer


@dataclass
class StepRecord:
    step: int
    node: int
    host_busy: float
    dev_busy: float
    sync_wait: float
    hd_bytes: int
    net_bytes: int
    local: float  # compute plus host/device exchange, up to the sync point
    net_time: float


@dataclass
class SimTrace:
    order: int
    records: list  # StepRecord, step-major
    step_walls: list
    kernel_times: list  # per node: {("host"|"device", kernel) or ("pci",): seconds}
    work: list  # elements processed per step, summed over nodes
    bulk_time: float
    bulk_bytes: int

    @property
    def steps(self):
        return len(self.step_walls)

    @property
    def total_time(self):
        return float(sum(self.step_walls)) + self.bulk_time

    def hd_bytes_per_step(self):
        out = {}
        for r in self.records:
            out[r.step] = out.get(r.step, 0) + r.hd_bytes
        return [out[s] for s in sorted(out)]

    def idle_fraction(self, node=None) -> float:
        """Share of host+device time spent waiting at the sync point."""
        rs = [r for r in self.records if node is None or r.node == node]
        wait = sum(r.sync_wait for r in rs)
        span = sum(2 * r.local for r in rs)
        return wait / span if span > 0 else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "node", "host_busy_s", "dev_busy_s", "sync_wait_s", "hd_bytes", "net_bytes"])
            for r in self.records:
                w.writerow(
                    [r.step, r.node, f"{r.host_busy:.9e}", f"{r.dev_busy:.9e}", f"{r.sync_wait:.9e}", r.hd_bytes, r.net_bytes]
                )


def _node_plan(scenario: SimScenario, node: int):
    """Kernel and transfer times of one node for one step."""
    N = scenario.order
    stats = scenario.partition.stats[node]
    table = scenario.node_table(node)
    xfer = table.transfer
    times = {}
    for k in KERNELS:
        times[("host", k)] = table.fit(k, N, "host")(stats.K_host)
        times[("device", k)] = table.fit(k, N, "device")(stats.K_dev) if stats.K_dev else 0.0
    one_way = face_bytes(stats.surface_faces, N)
    times[("pci",)] = 2.0 * xfer.message(one_way) if stats.K_dev else 0.0
    hd_bytes = 2 * one_way if stats.K_dev else 0
    return times, hd_bytes


def simulate(scenario: SimScenario) -> SimTrace:
    N = scenario.order
    P = scenario.num_nodes
    plans = [_node_plan(scenario, n) for n in range(P)]
    pairs = node_pair_faces(scenario.mesh, scenario.partition)

    net_time = [0.0] * P
    net_bytes = [0] * P
    for (a, b), faces in pairs.items():
        nbytes = int(face_bytes(faces, N))
        cost = 2.0 * scenario.network.message(nbytes)
        for n in (a, b):
            net_time[n] += cost
            net_bytes[n] += 2 * nbytes

    host_busy, dev_busy = [], []
    for times, _ in plans:
        h = 0.0
        for k in KERNELS:
            h += times[("host", k)]
        h += times[("pci",)]
        d = 0.0
        for k in KERNELS:
            d += times[("device", k)]
        host_busy.append(h)
        dev_busy.append(d)

    records, walls = [], []
    clock = 0.0
    # events: (time, kind, node); kinds ordered so completions precede exchange
    for step in range(scenario.steps):
        events = []
        for n in range(P):
            heapq.heappush(events, (clock + host_busy[n], 0, n))
            heapq.heappush(events, (clock + dev_busy[n], 0, n))
        pending = [2] * P
        synced = [0.0] * P
        ready = [0.0] * P
        done = 0
        while events:
            t, kind, n = heapq.heappop(events)
            if kind == 0:
                pending[n] -= 1
                if pending[n] == 0:
                    synced[n] = t
                    heapq.heappush(events, (t + net_time[n], 1, n))
            else:
                ready[n] = t
                done += 1
        assert done == P
        barrier = max(ready)
        walls.append(barrier - clock)
        for n in range(P):
            records.append(
                StepRecord(
                    step=step,
                    node=n,
                    host_busy=host_busy[n],
                    dev_busy=dev_busy[n],
                    sync_wait=abs(dev_busy[n] - host_busy[n]),
                    hd_bytes=plans[n][1],
                    net_bytes=net_bytes[n],
                    local=synced[n] - clock,
                    net_time=net_time[n],
                )
            )
        clock = barrier

    dof = (N + 1) ** 3 * NUM_COMPONENTS * BYTES_PER_VALUE
    bulk_time, bulk_bytes = 0.0, 0
    for n in range(P):
        k_dev = scenario.partition.stats[n].K_dev
        if k_dev:
            bulk_time = max(bulk_time, scenario.node_transfer(n).message(k_dev * dof))
            bulk_bytes += k_dev * dof

    work = [sum(s.K_host + s.K_dev for s in scenario.partition.stats)] * scenario.steps
    return SimTrace(N, records, walls, [p[0] for p in plans], work, bulk_time, bulk_bytes)


# ---------------------------------------------------------------------------
# Model validation
# ---------------------------------------------------------------------------


def predict_scenario(scenario: SimScenario) -> list:
    """Per-node StepPrediction from the performance model, actual surfaces."""
    out = []
    for n, s in enumerate(scenario.partition.stats):
        table = scenario.node_table(n)
        pred = step_prediction(scenario.order, s.K_dev, s.K_host, table, table.transfer, s.surface_faces)
        if s.K_dev == 0:
            # device idle: nothing launched and nothing to transfer
            pred = StepPrediction(dict.fromkeys(KERNELS, 0.0), pred.host, 0.0)
        out.append(pred)
    return out


@dataclass
class KernelDiff:
    node: int
    device: str
    kernel: str
    simulated: float
    predicted: float


@dataclass
class ValidationReport:
    ok: bool
    max_rel_error: float
    diffs: list

    @property
    def kernels(self):
        return sorted({(d.device, d.kernel) for d in self.diffs})

    def summary(self) -> str:
        if self.ok:
            return f"consistent (max relative error {self.max_rel_error:.3e})"
        lines = [f"mismatch (max relative error {self.max_rel_error:.3e})"]
        for d in self.diffs:
            lines.append(
                f"  node {d.node} {d.device} {d.kernel}: simulated {d.simulated:.6e} s, predicted {d.predicted:.6e} s"
            )
        return "\n".join(lines)


def _rel(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def validate_model(trace: SimTrace, prediction: list, tol: float = 1e-9) -> ValidationReport:
    """Check every simulated node-local step time against max(T_dev, T_host)."""
    worst = 0.0
    bad_nodes = set()
    for r in trace.records:
        err = _rel(r.local, prediction[r.node].step_time)
        worst = max(worst, err)
        if err > tol:
            bad_nodes.add(r.node)
    diffs = []
    for n in sorted(bad_nodes):
        sim, pred = trace.kernel_times[n], prediction[n]
        for k in KERNELS:
            for dev, table in (("host", pred.host), ("device", pred.device)):
                if _rel(sim[(dev, k)], table[k]) > tol:
                    diffs.append(KernelDiff(n, dev, k, sim[(dev, k)], table[k]))
        if _rel(sim[("pci",)], pred.pci) > tol:
            diffs.append(KernelDiff(n, "host", "pci", sim[("pci",)], pred.pci))
    return ValidationReport(not bad_nodes, worst, diffs)


# ---------------------------------------------------------------------------
# Strategy comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyResult:
    strategy: str
    step_time: float
    wall_time: float
    hd_bytes_per_step: int
    net_bytes_per_step: int
    speedup: float = 1.0


@dataclass
class StrategyComparison:
    order: int
    steps: int
    results: list

    def by_name(self, name) -> StrategyResult:
        for r in self.results:
            if r.strategy == name:
                return r
        raise KeyError(name)

    def transfer_ratio(self, a="nested", b="offload_all_volume_loop") -> float:
        return self.by_name(a).hd_bytes_per_step / self.by_name(b).hd_bytes_per_step

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "step_time_s", "wall_time_s", "hd_bytes_per_step", "net_bytes_per_step", "speedup"])
            for r in self.results:
                w.writerow(
                    [r.strategy, f"{r.step_time:.9e}", f"{r.wall_time:.9e}", r.hd_bytes_per_step, r.net_bytes_per_step, f"{r.speedup:.6f}"]
                )


STRATEGIES = ("offload_none", "offload_all_volume_loop", "nested")


def compare_strategies(scenario: SimScenario, strategies=STRATEGIES, native_penalty: float = 4.0) -> StrategyComparison:
    """Modelled step and wall times of several ways to use the accelerator.

    ``offload_all_volume_loop`` ships every element's volume data to the
    device and back each step; ``nested`` is the simulated face-only scheme;
    ``native_mic`` runs everything on the device with inter-node traffic
    slowed by ``native_penalty`` (illustrative only).
    """
    N, steps = scenario.order, scenario.steps
    pairs = node_pair_faces(scenario.mesh, scenario.partition)
    P = scenario.num_nodes
    net_time, net_bytes = [0.0] * P, [0] * P
    for (a, b), faces in pairs.items():
        nbytes = int(face_bytes(faces, N))
        for n in (a, b):
            net_time[n] += 2.0 * scenario.network.message(nbytes)
            net_bytes[n] += 2 * nbytes
    sizes = scenario.partition.node.sizes()
    vol_bytes = (N + 1) ** 3 * NUM_COMPONENTS * BYTES_PER_VALUE

    rows = []
    for name in strategies:
        if name == "offload_none":
            step = max(scenario.node_table(n).total(N, "host", K) + net_time[n] for n, K in enumerate(sizes))
            rows.append((name, step, steps * step, 0, sum(net_bytes)))
        elif name == "offload_all_volume_loop":
            step, hd = 0.0, 0
            for n, K in enumerate(sizes):
                t = scenario.node_table(n)
                dev = t.fit("volume_loop", N, "device")(K)
                host = sum(t.fit(k, N, "host")(K) for k in KERNELS if k != "volume_loop")
                xfer = 2.0 * t.transfer.message(K * vol_bytes)
                step = max(step, max(dev, host) + xfer + net_time[n])
                hd += 2 * K * vol_bytes
            rows.append((name, step, steps * step, hd, sum(net_bytes)))
        elif name == "nested":
            trace = simulate(scenario)
            step = float(np.mean(trace.step_walls))
            rows.append((name, step, trace.total_time, trace.hd_bytes_per_step()[0], sum(net_bytes)))
        elif name == "native_mic":
            step = max(
                scenario.node_table(n).total(N, "device", K) + native_penalty * net_time[n]
                for n, K in enumerate(sizes)
            )
            rows.append((name, step, steps * step, 0, sum(net_bytes)))
        else:
            raise ValueError(f"unknown strategy {name!r}")

    base = None
    for r in rows:
        if r[0] == "offload_none":
            base = r[2]
    results = [
        StrategyResult(n, s, w, hd, nb, (base / w) if base is not None and w > 0 else float("nan"))
        for n, s, w, hd, nb in rows
    ]
    return StrategyComparison(N, steps, results)
