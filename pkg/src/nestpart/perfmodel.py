"""Kernel timing tables, the host/device transfer model and the load-balance solver.

Every kernel time is modelled as ``a + b K`` per (kernel, N, device). The
host time of a step also carries the shared-face transfer, so the balance
equation is

    sum_k dev_k(K_dev) = sum_k host_k(K - K_dev) + pci(K_dev)
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .errors import MissingCalibrationError
from .partition import NUM_COMPONENTS, round_half_up

KERNELS = ("volume_loop", "int_flux", "interp_q", "lift", "rk", "bound_flux", "parallel_flux")
DEVICES = ("host", "device")
BYTES_PER_VALUE = 8


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineFit:
    a: float
    b: float
    r2: float = 1.0
    flagged: bool = False
    rejected: tuple = ()

    def __call__(self, K):
        return self.a + self.b * K

    def scaled(self, c: float) -> "AffineFit":
        return replace(self, a=self.a * c, b=self.b * c)


MIN_SLOPE = 1e-15


def _lstsq(K, t):
    A = np.stack([np.ones_like(K), K], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, t, rcond=None)
    pred = a + b * K
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    ss_res = float(np.sum((t - pred) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(a), float(b), r2


def _non_monotone(K, t, tol):
    order = np.argsort(K)
    ts = t[order]
    return bool(np.any(ts[1:] < ts[:-1] * (1.0 - tol)))


def fit_affine(counts, times, tol: float = 0.1) -> AffineFit:
    """Least-squares a + b K.

    Times that fall by more than ``tol`` (relative) as K grows count as noise:
    the worst-residual point is dropped and the fit repeated, keeping at least
    two points, and the result is flagged. A non-positive slope is clamped to a
    tiny positive value and flagged as well.
    """
    K = np.asarray(counts, dtype=float)
    t = np.asarray(times, dtype=float)
    if K.shape != t.shape or len(K) < 2:
        raise ValueError("need at least two (count, time) pairs")
    if len(np.unique(K)) < 2:
        raise ValueError("need at least two distinct counts")
    flagged = False
    rejected = []
    a, b, r2 = _lstsq(K, t)
    while _non_monotone(K, t, tol) and len(K) > 2:
        worst = int(np.argmax(np.abs(t - (a + b * K))))
        rejected.append(float(K[worst]))
        K, t = np.delete(K, worst), np.delete(t, worst)
        a, b, r2 = _lstsq(K, t)
        flagged = True
    if b <= 0:
        b = MIN_SLOPE
        flagged = True
    return AffineFit(a, b, r2, flagged, tuple(rejected))


# ---------------------------------------------------------------------------
# Transfer model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransferModel:
    """Affine host<->device cost per message: alpha + beta * bytes."""

    alpha: float = 0.0
    beta: float = 1e-9

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def message(self, nbytes):
        return self.alpha + self.beta * nbytes

    def to_json(self):
        return {"alpha": self.alpha, "beta": self.beta}


def ideal_surface(k_dev) -> float:
    """Faces of a cube of k_dev elements."""
    return 6.0 * k_dev ** (2.0 / 3.0)


def face_bytes(faces, N: int):
    return faces * (N + 1) ** 2 * NUM_COMPONENTS * BYTES_PER_VALUE


def pci_time(k_dev, N: int, model: TransferModel, surface_faces=None) -> float:
    """Send plus receive of the shared faces, once each per step."""
    faces = ideal_surface(k_dev) if surface_faces is None else surface_faces
    return 2.0 * (model.alpha + model.beta * face_bytes(faces, N))


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


@dataclass
class KernelTimeTable:
    entries: dict = field(default_factory=dict)  # (kernel, N, device) -> AffineFit
    transfer: TransferModel = field(default_factory=TransferModel)

    def fit(self, kernel: str, N: int, device: str) -> AffineFit:
        try:
            return self.entries[(kernel, N, device)]
        except KeyError:
            raise MissingCalibrationError(
                f"no calibration for kernel {kernel!r} at N={N} on {device}"
            ) from None

    def orders(self):
        return sorted({N for _, N, _ in self.entries})

    def check(self, N: int, devices=DEVICES):
        for d in devices:
            for k in KERNELS:
                self.fit(k, N, d)

    def kernel_times(self, N: int, device: str, K) -> dict:
        return {k: self.fit(k, N, device)(K) for k in KERNELS}

    def total(self, N: int, device: str, K) -> float:
        t = 0.0
        for k in KERNELS:
            t += self.fit(k, N, device)(K)
        return t

    def scaled(self, c: float, transfer: bool = True) -> "KernelTimeTable":
        """Every time multiplied by c (transfer costs included unless disabled)."""
        xfer = TransferModel(self.transfer.alpha * c, self.transfer.beta * c) if transfer else self.transfer
        return KernelTimeTable({key: f.scaled(c) for key, f in self.entries.items()}, xfer)

    def with_entry(self, kernel, N, device, fit: AffineFit) -> "KernelTimeTable":
        entries = dict(self.entries)
        entries[(kernel, N, device)] = fit
        return KernelTimeTable(entries, self.transfer)

    def to_json(self) -> dict:
        rows = []
        for (k, N, d), f in sorted(self.entries.items(), key=lambda kv: (kv[0][1], kv[0][2], KERNELS.index(kv[0][0]))):
            row = {"kernel": k, "N": N, "device": d, "a": f.a, "b": f.b, "r2": f.r2}
            if f.flagged:
                row["flagged"] = True
                row["rejected"] = list(f.rejected)
            rows.append(row)
        return {"entries": rows, "transfer": self.transfer.to_json()}

    @classmethod
    def from_json(cls, data: dict) -> "KernelTimeTable":
        entries = {}
        for row in data["entries"]:
            if row["kernel"] not in KERNELS:
                raise ValueError(f"unknown kernel {row['kernel']!r}")
            if row["device"] not in DEVICES:
                raise ValueError(f"unknown device {row['device']!r}")
            fit = AffineFit(
                float(row["a"]),
                float(row["b"]),
                float(row.get("r2", 1.0)),
                bool(row.get("flagged", False)),
                tuple(row.get("rejected", ())),
            )
            if not fit.b > 0:
                raise ValueError(f"slope must be positive for {row['kernel']} N={row['N']}")
            entries[(row["kernel"], int(row["N"]), row["device"])] = fit
        xfer = data.get("transfer", {})
        return cls(entries, TransferModel(float(xfer.get("alpha", 0.0)), float(xfer.get("beta", 1e-9))))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "KernelTimeTable":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def affine_table(orders, host: dict, device: dict | None = None, transfer=None) -> KernelTimeTable:
    """Build a table from ``{kernel: (a, b)}`` maps shared by every order."""
    entries = {}
    for N in orders:
        for dev, spec in (("host", host), ("device", device)):
            if spec is None:
                continue
            for k in KERNELS:
                a, b = spec[k]
                entries[(k, N, dev)] = AffineFit(float(a), float(b))
    return KernelTimeTable(entries, transfer or TransferModel())


# ---------------------------------------------------------------------------
# Device profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceProfile:
    """Synthetic accelerator: device kernel time = multiplier x host kernel time."""

    name: str = "device"
    multipliers: dict = field(default_factory=dict)
    default: float = 1.0
    alpha: float = 0.0
    beta: float = 1e-9

    def __post_init__(self):
        if not self.default > 0 or any(not m > 0 for m in self.multipliers.values()):
            raise ValueError("profile multipliers must be positive")
        unknown = set(self.multipliers) - set(KERNELS)
        if unknown:
            raise ValueError(f"unknown kernels in profile: {sorted(unknown)}")

    def multiplier(self, kernel: str) -> float:
        return float(self.multipliers.get(kernel, self.default))

    @property
    def transfer(self) -> TransferModel:
        return TransferModel(self.alpha, self.beta)

    @classmethod
    def uniform(cls, scale: float, alpha=0.0, beta=1e-9, name="device"):
        return cls(name, {}, scale, alpha, beta)

    def to_json(self):
        return {
            "name": self.name,
            "multipliers": dict(self.multipliers),
            "default": self.default,
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DeviceProfile":
        return cls(
            data.get("name", "device"),
            {k: float(v) for k, v in data.get("multipliers", {}).items()},
            float(data.get("default", 1.0)),
            float(data.get("alpha", 0.0)),
            float(data.get("beta", 1e-9)),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def apply_profile(table: KernelTimeTable, profile: DeviceProfile) -> KernelTimeTable:
    """Replace device rows by scaled host rows; the profile also sets the transfer model."""
    entries = {key: f for key, f in table.entries.items() if key[2] == "host"}
    for (k, N, d), f in list(entries.items()):
        entries[(k, N, "device")] = f.scaled(profile.multiplier(k))
    return KernelTimeTable(entries, profile.transfer)


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------

Measure = Callable[[str, int, int], float]


class KernelBench:
    """Times the real kernels on synthetic data for one (N, K)."""

    def __init__(self, N: int, K: int, seed: int = 0):
        from . import physics
        from .dg_core import BrickGeometry, ReferenceElement
        from .physics import Material

        rng = np.random.default_rng(seed)
        M = N + 1
        self.N, self.K = N, K
        self.ref = ReferenceElement.create(N)
        self.geom = BrickGeometry(0.1)
        self.mat = Material(np.ones(K), np.full(K, 2.0), np.ones(K))
        self.q = rng.standard_normal((K, NUM_COMPONENTS, M, M, M))
        self.faces = rng.standard_normal((K, 6, NUM_COMPONENTS, M, M))
        self.k = rng.standard_normal(self.q.shape)
        # interior faces scale with K, boundary and inter-node faces with the surface
        self.n_int = max(1, 3 * K)
        self.n_surf = max(1, int(round(ideal_surface(K))))
        self._physics = physics

    def _flux(self, F):
        from .solver import from_wave_state, to_wave_state

        M = self.N + 1
        idx = np.arange(F) % self.K
        tm = to_wave_state(self.faces[idx, 0])
        tp = to_wave_state(self.faces[idx, 1])
        mat = self.mat.take(idx)
        n = np.array([1.0, 0.0, 0.0])
        out = self._physics.riemann_flux(tm, tp, mat, mat, n)
        return from_wave_state(out).reshape(F, NUM_COMPONENTS, M, M)

    def run(self, kernel: str):
        from .dg_core import interp_q, lift, volume_loop

        if kernel == "volume_loop":
            volume_loop(self.q, self.ref, self.geom, self.mat)
        elif kernel == "interp_q":
            interp_q(self.q)
        elif kernel == "lift":
            lift(self.faces, self.ref, self.geom)
        elif kernel == "rk":
            self.q + 0.01 * (self.k + 2.0 * self.k + 2.0 * self.k + self.k)
        elif kernel == "int_flux":
            self._flux(self.n_int)
        elif kernel in ("bound_flux", "parallel_flux"):
            self._flux(self.n_surf)
        else:
            raise ValueError(f"unknown kernel {kernel!r}")

    def time(self, kernel: str, repeats: int = 3) -> float:
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            self.run(kernel)
            best = min(best, time.perf_counter() - t0)
        return best


def measure_kernel_times(N: int, K: int, repeats: int = 3, seed: int = 0) -> dict:
    bench = KernelBench(N, K, seed)
    return {k: bench.time(k, repeats) for k in KERNELS}


def calibrate(
    orders: Iterable[int],
    counts: Iterable[int],
    device_profile: DeviceProfile | None = None,
    measure: Measure | None = None,
    device_measure: Measure | None = None,
    repeats: int = 3,
    tol: float = 0.1,
    seed: int = 0,
) -> KernelTimeTable:
    """Fit per-kernel affine models from timings at several element counts.

    ``measure(kernel, N, K)`` supplies host times (default: the real kernels).
    Device rows come from ``device_measure`` when given, otherwise from the
    host rows scaled by ``device_profile``. ``seed`` fixes the benchmark data.
    """
    orders = list(orders)
    counts = sorted(set(int(c) for c in counts))
    if len(counts) < 3:
        raise ValueError("calibration needs at least three distinct element counts")
    if any(c <= 0 for c in counts):
        raise ValueError("element counts must be positive")

    if measure is None:
        cache = {}

        def measure(kernel, N, K):
            if (N, K) not in cache:
                cache[(N, K)] = measure_kernel_times(N, K, repeats, seed)
            return cache[(N, K)][kernel]

    entries = {}
    for N in orders:
        for k in KERNELS:
            entries[(k, N, "host")] = fit_affine(counts, [measure(k, N, K) for K in counts], tol)
            if device_measure is not None:
                entries[(k, N, "device")] = fit_affine(counts, [device_measure(k, N, K) for K in counts], tol)
    table = KernelTimeTable(entries, TransferModel())
    if device_measure is None:
        table = apply_profile(table, device_profile or DeviceProfile())
    elif device_profile is not None:
        table.transfer = device_profile.transfer
    return table


# ---------------------------------------------------------------------------
# Step prediction and balance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepPrediction:
    device: dict  # kernel -> seconds
    host: dict
    pci: float

    @property
    def t_dev(self):
        return sum(self.device[k] for k in KERNELS)

    @property
    def t_host(self):
        return sum(self.host[k] for k in KERNELS) + self.pci

    @property
    def step_time(self):
        return max(self.t_dev, self.t_host)


def step_prediction(N, k_dev, k_host, table: KernelTimeTable, xfer=None, surface_faces=None) -> StepPrediction:
    xfer = table.transfer if xfer is None else xfer
    return StepPrediction(
        table.kernel_times(N, "device", k_dev),
        table.kernel_times(N, "host", k_host),
        pci_time(k_dev, N, xfer, surface_faces),
    )


def predict_step_time(N, k_dev, k_host, table: KernelTimeTable, xfer=None, surface_faces=None):
    """(T_dev, T_host); the step takes max of the two since the device runs asynchronously."""
    xfer = table.transfer if xfer is None else xfer
    t_dev = table.total(N, "device", k_dev)
    t_host = table.total(N, "host", k_host) + pci_time(k_dev, N, xfer, surface_faces)
    return t_dev, t_host


@dataclass(frozen=True)
class BalanceSolution:
    k_dev: int
    k_host: int
    t_dev: float
    t_host: float

    @property
    def residual(self):
        return abs(self.t_dev - self.t_host)

    @property
    def ratio(self):
        return self.k_dev / self.k_host if self.k_host else math.inf

    @property
    def step_time(self):
        return max(self.t_dev, self.t_host)


def balance(
    N: int,
    K: int,
    table: KernelTimeTable,
    xfer: TransferModel | None = None,
    surface_fn: Callable[[int], float] | None = None,
) -> BalanceSolution:
    """Integer K_dev in [0, K] minimising |T_dev - T_host|; ties go to the smaller K_dev.

    With the ideal surface estimate f(k) = T_dev - T_host is affine plus a
    convex ``-k^(2/3)`` term, so f is convex: one bisection finds its minimum
    and one more on each monotone side finds the sign changes. An arbitrary
    ``surface_fn`` (actual grown-set surfaces) falls back to a full scan.
    """
    if K < 0:
        raise ValueError("K must be non-negative")
    table.check(N)
    xfer = table.transfer if xfer is None else xfer

    def times(k):
        s = None if surface_fn is None else surface_fn(k)
        return predict_step_time(N, k, K - k, table, xfer, s)

    cache = {}

    def f(k):
        if k not in cache:
            td, th = times(k)
            cache[k] = td - th
        return cache[k]

    if surface_fn is not None:
        candidates = range(K + 1)
    else:
        # smallest k with f(k+1) - f(k) >= 0 is the minimum of the convex f
        lo, hi = 0, K
        while lo < hi:
            mid = (lo + hi) // 2
            if f(mid + 1) - f(mid) >= 0:
                hi = mid
            else:
                lo = mid + 1
        kmin = lo
        candidates = {0, K, kmin}
        # increasing branch: first k >= kmin with f(k) >= 0
        lo, hi = kmin, K
        while lo < hi:
            mid = (lo + hi) // 2
            if f(mid) >= 0:
                hi = mid
            else:
                lo = mid + 1
        candidates.update((lo - 1, lo))
        # decreasing branch: first k <= kmin with f(k) <= 0
        lo, hi = 0, kmin
        while lo < hi:
            mid = (lo + hi) // 2
            if f(mid) <= 0:
                hi = mid
            else:
                lo = mid + 1
        candidates.update((lo - 1, lo))
        candidates = sorted(c for c in candidates if 0 <= c <= K)

    best = min(candidates, key=lambda k: (abs(f(k)), k))
    td, th = times(best)
    return BalanceSolution(best, K - best, td, th)


def balance_scan(N, K, table, xfer=None, surface_fn=None):
    """Exhaustive |T_dev - T_host| for every k in [0, K] (reference for tests)."""
    xfer = table.transfer if xfer is None else xfer
    out = np.empty(K + 1)
    for k in range(K + 1):
        s = None if surface_fn is None else surface_fn(k)
        td, th = predict_step_time(N, k, K - k, table, xfer, s)
        out[k] = td - th
    return out


def derive_device_profile(
    N: int,
    K: int,
    host_table: KernelTimeTable,
    ratio: float = 1.6,
    alpha: float = 0.0,
    beta: float = 1e-9,
    name: str = "synthetic",
) -> DeviceProfile:
    """Uniform device multiplier that puts the balance point at K_dev/K_host = ratio.

    Solves the balance equation for the multiplier s at the integer split
    K_dev = round(K r / (1 + r)).
    """
    k_dev = round_half_up(K * ratio / (1.0 + ratio))
    xfer = TransferModel(alpha, beta)
    host = host_table.total(N, "host", K - k_dev) + pci_time(k_dev, N, xfer)
    dev = host_table.total(N, "host", k_dev)
    if not dev > 0:
        raise ValueError("host table yields a non-positive time for the device share")
    return DeviceProfile(name, {}, host / dev, alpha, beta)
