"""Network topologies, Rayleigh/path-loss channel draws and the on-disk dataset format.

Sampling order inside one sample stream:

1. for each pair i: transmitter x, y (two uniforms scaled to the area), then
   receiver angle and radius, re-drawn together until the receiver lies in
   the square;
2. for each channel m, receiver i, transmitter j: one Box-Muller pair
   (two uniforms) giving the real and imaginary part of the fading.

Sample k of a dataset with seed s uses the stream seeded by ``s ^ k``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation, CorruptionError, FormatError, TruncationError
from .rng import LockstepXoshiro, Xoshiro256pp, box_muller

MAGIC = b"MCRA1\n"
FORMAT_VERSION = 1
HEADER_KEYS = (
    "version", "D", "M", "num_samples", "seed", "area_side", "d_min", "d_max",
    "gamma", "noise_power", "p_max",
)


@dataclass(frozen=True)
class NetworkConfig:
    D: int
    M: int
    area_side: float = 100.0
    d_min: float = 2.0
    d_max: float = 10.0
    gamma: float = 3.0
    noise_power: float = 1e-4
    p_max: float = 1.0
    weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if int(self.D) != self.D or self.D < 1:
            raise ContractViolation(f"D must be a positive integer, got {self.D}")
        if int(self.M) != self.M or self.M < 1:
            raise ContractViolation(f"M must be a positive integer, got {self.M}")
        if not (0 < self.d_min <= self.d_max <= self.area_side):
            raise ContractViolation(
                f"need 0 < d_min <= d_max <= area_side, got {self.d_min}, {self.d_max}, {self.area_side}"
            )
        if not self.noise_power > 0:
            raise ContractViolation("noise_power must be positive")
        if not self.p_max > 0:
            raise ContractViolation("p_max must be positive")
        if not 0 <= self.seed < 2**64:
            raise ContractViolation("seed must be a 64-bit unsigned integer")
        if self.weights is not None:
            w = tuple(float(a) for a in self.weights)
            if len(w) != self.D:
                raise ContractViolation(f"expected {self.D} weights, got {len(w)}")
            if any(not a >= 0 for a in w):
                raise ContractViolation("weights must be nonnegative")
            object.__setattr__(self, "weights", w)

    @property
    def alpha(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(self.D)
        return np.asarray(self.weights, dtype=np.float64)

    def with_shape(self, D: int, M: int) -> "NetworkConfig":
        """Same physical parameters with a different pair/channel count (unit weights)."""
        return replace(self, D=D, M=M, weights=None)


@dataclass
class Topology:
    tx: np.ndarray  # (D, 2)
    rx: np.ndarray  # (D, 2)
    dist: np.ndarray  # (D, D), dist[i, j] = |rx_i - tx_j|


@dataclass
class ChannelInstance:
    """Gain magnitudes ``gains[m, i, j] = |h_ij^m|`` (row = receiver, column = transmitter)."""

    gains: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if self.gains.ndim != 3 or self.gains.shape[1] != self.gains.shape[2]:
            raise ContractViolation(f"gains must have shape (M, D, D), got {self.gains.shape}")

    @property
    def M(self) -> int:
        return self.gains.shape[0]

    @property
    def D(self) -> int:
        return self.gains.shape[1]


@dataclass
class Dataset:
    """A config plus a stacked ``(num_samples, M, D, D)`` gain array."""

    config: NetworkConfig
    gains: np.ndarray = field(repr=False)

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        D, M = self.config.D, self.config.M
        if g.size == 0:
            g = g.reshape(0, M, D, D)
        if g.ndim != 4 or g.shape[1:] != (M, D, D):
            raise ContractViolation(f"gains shape {g.shape} does not match D={D}, M={M}")
        self.gains = g

    def __len__(self) -> int:
        return self.gains.shape[0]

    def __getitem__(self, k: int) -> ChannelInstance:
        return ChannelInstance(self.gains[k])

    @property
    def samples(self) -> list[ChannelInstance]:
        return [self[k] for k in range(len(self))]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.config, self.gains[:n])

    def digest(self) -> str:
        """sha256 over the little-endian payload; identifies the test set in reports."""
        return hashlib.sha256(self.gains.astype("<f8").tobytes()).hexdigest()


def sample_topology(config: NetworkConfig, stream: Xoshiro256pp) -> Topology:
    D, side = config.D, config.area_side
    span = config.d_max - config.d_min
    tx = np.empty((D, 2))
    rx = np.empty((D, 2))
    for i in range(D):
        tx_x = side * stream.uniform()
        tx_y = side * stream.uniform()
        while True:
            theta = 2.0 * math.pi * stream.uniform()
            radius = config.d_min + span * stream.uniform()
            rx_x = tx_x + radius * math.cos(theta)
            rx_y = tx_y + radius * math.sin(theta)
            if 0.0 <= rx_x <= side and 0.0 <= rx_y <= side:
                break
        tx[i] = tx_x, tx_y
        rx[i] = rx_x, rx_y
    diff = rx[:, None, :] - tx[None, :, :]
    dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    return Topology(tx, rx, dist)


def path_gain(dist: np.ndarray, gamma: float) -> np.ndarray:
    """Amplitude path gain sqrt(d^-gamma)."""
    return np.sqrt(np.asarray(dist, dtype=np.float64) ** -gamma)


def sample_instance(config: NetworkConfig, topo: Topology, stream: Xoshiro256pp) -> ChannelInstance:
    D, M = config.D, config.M
    amp = path_gain(topo.dist, config.gamma)
    g = np.empty((M, D, D))
    for m in range(M):
        for i in range(D):
            for j in range(D):
                x, y = stream.normal_pair()
                g[m, i, j] = amp[i, j] * math.sqrt(0.5 * (x * x + y * y))
    return ChannelInstance(g)


def generate_dataset(config: NetworkConfig, num_samples: int) -> Dataset:
    """Draw ``num_samples`` instances, each with its own topology and stream.

    Topologies are drawn per stream in scalar code (rejection sampling has a
    data-dependent draw count); the fading draws of all streams then advance
    in lockstep.
    """
    D, M = config.D, config.M
    if num_samples < 0:
        raise ContractViolation("num_samples must be nonnegative")
    if num_samples == 0:
        return Dataset(config, np.zeros((0, M, D, D)))
    streams = [Xoshiro256pp.from_seed(config.seed, k) for k in range(num_samples)]
    amp = np.stack([path_gain(sample_topology(config, s).dist, config.gamma) for s in streams])
    lock = LockstepXoshiro.from_scalar(streams)
    u = lock.uniforms(2 * M * D * D).reshape(num_samples, M, D, D, 2)
    x, y = box_muller(u[..., 0], u[..., 1])
    gains = amp[:, None, :, :] * np.sqrt(0.5 * (x * x + y * y))
    return Dataset(config, gains)


def _header(ds: Dataset) -> dict:
    c = ds.config
    header = {
        "version": FORMAT_VERSION,
        "D": c.D,
        "M": c.M,
        "num_samples": len(ds),
        "seed": c.seed,
        "area_side": float(c.area_side),
        "d_min": float(c.d_min),
        "d_max": float(c.d_max),
        "gamma": float(c.gamma),
        "noise_power": float(c.noise_power),
        "p_max": float(c.p_max),
    }
    if c.weights is not None and any(a != 1.0 for a in c.weights):
        header["weights"] = list(c.weights)
    return header


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    header = json.dumps(_header(ds), separators=(",", ":"), allow_nan=False).encode()
    payload = ds.gains.astype("<f8").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header + b"\n")
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror or exc}") from exc


def read_dataset(path: str | os.PathLike) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise FormatError(f"{path}: header line is not terminated")
    try:
        header = json.loads(raw[len(MAGIC):end])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise FormatError(f"{path}: header missing {', '.join(missing)}")
    if header["version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {header['version']}")
    try:
        config = NetworkConfig(
            D=header["D"], M=header["M"], area_side=header["area_side"],
            d_min=header["d_min"], d_max=header["d_max"], gamma=header["gamma"],
            noise_power=header["noise_power"], p_max=header["p_max"],
            weights=header.get("weights"), seed=header["seed"],
        )
    except ContractViolation as exc:
        raise FormatError(f"{path}: invalid header ({exc})") from exc
    n = header["num_samples"]
    expected = n * config.M * config.D * config.D * 8
    payload = raw[end + 1:]
    if len(payload) != expected:
        raise TruncationError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    gains = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(gains)):
        raise CorruptionError(f"{path}: payload contains non-finite values")
    if np.any(gains < 0):
        raise CorruptionError(f"{path}: payload contains negative gains")
    return Dataset(config, gains.reshape(n, config.M, config.D, config.D))
