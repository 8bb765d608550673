"""Non-learned reference allocations and the exhaustive grid search."""

from __future__ import annotations

import enum
import itertools

import numpy as np

from .channel import ChannelInstance, NetworkConfig
from .errors import ContractViolation
from .rates import Allocation, weighted_sum_rate


class BaselineKind(enum.Enum):
    HEURISTIC_MAX_GAIN = "heuristic-max-gain"
    EQUAL_SPLIT = "equal-split"
    ICP_CAP_POLICY = "icp-cap-policy"


def heuristic_powers(gains: np.ndarray, p_max: float) -> np.ndarray:
    """Full budget on each pair's strongest direct channel; ``(..., D, M)``.

    ``argmax`` keeps the first maximum, so ties go to the lowest channel index.
    """
    direct = np.swapaxes(np.diagonal(gains, axis1=-2, axis2=-1), -1, -2)
    best = np.argmax(direct, axis=-1)
    P = np.zeros(direct.shape)
    np.put_along_axis(P, best[..., None], p_max, axis=-1)
    return P


def heuristic_allocate(inst: ChannelInstance, config: NetworkConfig) -> Allocation:
    return Allocation.from_powers(heuristic_powers(inst.gains, config.p_max), config.p_max)


def equal_split_allocate(inst: ChannelInstance, config: NetworkConfig) -> Allocation:
    return Allocation.from_powers(np.full((inst.D, inst.M), config.p_max / inst.M), config.p_max)


def icp_powers(raw: np.ndarray, p_max: float, M: int) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0) or np.any(raw > 1) or not np.all(np.isfinite(raw)):
        raise ContractViolation("ICP raw outputs must lie in [0, 1]")
    return raw * (p_max / M)


def icp_cap(raw: np.ndarray, config: NetworkConfig) -> Allocation:
    """Per-channel cap of ``P_max / M``; channels are not renormalised against each other."""
    raw = np.asarray(raw)
    return Allocation.from_powers(icp_powers(raw, config.p_max, raw.shape[-1]), config.p_max)


def _user_level_combos(levels: int, M: int, p_max: float) -> np.ndarray:
    """All per-user power vectors on the grid whose total fits the budget."""
    steps = range(levels)
    combos = [c for c in itertools.product(steps, repeat=M) if sum(c) <= levels - 1]
    return np.array(combos, dtype=np.float64) * (p_max / (levels - 1))


def grid_search_allocate(inst: ChannelInstance, config: NetworkConfig, levels: int = 21,
                         chunk: int = 65536) -> Allocation:
    """Exhaustive search over ``levels`` evenly spaced powers per (pair, channel).

    Only feasible grid points are evaluated.  Cost grows as
    ``K**D`` with ``K`` the feasible per-user combinations, so keep D and M small.
    """
    if levels < 2:
        raise ContractViolation("grid needs at least two levels")
    D, M = inst.D, inst.M
    per_user = _user_level_combos(levels, M, config.p_max)
    K = per_user.shape[0]
    total = K ** D
    if total > 50_000_000:
        raise ContractViolation(f"grid of {total} points is too large for exhaustive search")
    best_val, best_P = -np.inf, None
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        digits = np.empty((flat.size, D), dtype=np.int64)
        rem = flat
        for i in range(D - 1, -1, -1):
            digits[:, i] = rem % K
            rem = rem // K
        P = per_user[digits]  # (n, D, M)
        vals = weighted_sum_rate(inst.gains, P, config)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_P = vals[k], P[k]
    return Allocation.from_powers(best_P, config.p_max)
