"""SINR, per-channel rates, the weighted sum-rate objective and its Lagrangian.

Every function accepts optional leading batch dimensions: gains ``(..., M, D, D)``
and powers ``(..., D, M)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelInstance, NetworkConfig
from .errors import ContractViolation

ACTIVITY_FRACTION = 1e-6
FEASIBILITY_SLACK = 1e-9
LN2 = np.log(2.0)


def _gains(inst) -> np.ndarray:
    return inst.gains if isinstance(inst, ChannelInstance) else np.asarray(inst, dtype=np.float64)


def derive_assignment(P: np.ndarray, threshold: float) -> np.ndarray:
    """Binary channel assignment: ``c = 1`` iff ``p > threshold`` (strict)."""
    return (np.asarray(P) > threshold).astype(np.int8)


@dataclass
class Allocation:
    P: np.ndarray  # (D, M) watts
    C: np.ndarray  # (D, M) binary

    @classmethod
    def from_powers(cls, P: np.ndarray, p_max: float) -> "Allocation":
        P = np.asarray(P, dtype=np.float64)
        return cls(P, derive_assignment(P, ACTIVITY_FRACTION * p_max))

    def is_feasible(self, p_max: float) -> bool:
        return bool(np.all(self.P >= 0) and np.all(self.P.sum(axis=-1) <= p_max * (1 + FEASIBILITY_SLACK)))


@dataclass
class RateReport:
    rates: np.ndarray  # (D, M) bits/s/Hz
    per_pair: np.ndarray  # (D,)
    weighted_sum: float


def _powers(alloc) -> np.ndarray:
    P = alloc.P if isinstance(alloc, Allocation) else np.asarray(alloc, dtype=np.float64)
    if np.any(P < 0):
        raise ContractViolation("negative transmit power")
    return P


def _signal_and_interference(g: np.ndarray, P: np.ndarray, noise: float):
    """Direct received power and interference-plus-noise, both ``(..., D, M)``."""
    g2 = g * g
    pm = np.swapaxes(P, -1, -2)  # (..., M, D)
    diag = np.diagonal(g2, axis1=-2, axis2=-1)
    off = g2 * (1.0 - np.eye(g.shape[-1]))
    interference = np.einsum("...mij,...mj->...mi", off, pm) + noise
    return np.swapaxes(diag * pm, -1, -2), np.swapaxes(interference, -1, -2)


def compute_sinr(inst, alloc, config: NetworkConfig) -> np.ndarray:
    g = _gains(inst)
    P = _powers(alloc)
    direct, interference = _signal_and_interference(g, P, config.noise_power)
    return direct / interference


def rates(inst, alloc, config: NetworkConfig) -> np.ndarray:
    """Per-pair per-channel rates ``log2(1 + SINR)``, shape ``(..., D, M)``."""
    return np.log2(1.0 + compute_sinr(inst, alloc, config))


def weighted_sum_rate(inst, alloc, config: NetworkConfig) -> np.ndarray:
    """Weighted sum rate; a scalar per batch element."""
    return np.einsum("...im,i->...", rates(inst, alloc, config), config.alpha)


def compute_sum_rate(inst, alloc, config: NetworkConfig) -> RateReport:
    r = rates(inst, alloc, config)
    per_pair = r.sum(axis=-1)
    return RateReport(r, per_pair, float(per_pair @ config.alpha))


def sum_rate_grad(inst, alloc, config: NetworkConfig) -> np.ndarray:
    """Gradient of the weighted sum rate with respect to every ``p_k^m``.

    With ``T_i = sum_j g_ij^2 p_j + noise`` and ``I_i = T_i - g_ii^2 p_i``,
    ``R_i = log2 T_i - log2 I_i`` so
    ``dR/dp_k = sum_i a_i g_ik^2 (1/T_i - [i != k]/I_i) / ln 2``.
    """
    g = _gains(inst)
    P = _powers(alloc)
    direct, interference = _signal_and_interference(g, P, config.noise_power)
    alpha = config.alpha
    a_t = np.swapaxes(alpha[:, None] / (direct + interference), -1, -2)  # (..., M, D)
    a_i = np.swapaxes(alpha[:, None] / interference, -1, -2)
    g2 = g * g
    off = g2 * (1.0 - np.eye(g.shape[-1]))
    grad = np.einsum("...mik,...mi->...mk", g2, a_t) - np.einsum("...mik,...mi->...mk", off, a_i)
    return np.swapaxes(grad, -1, -2) / LN2


def constraint_slack(P: np.ndarray, p_max: float) -> np.ndarray:
    """Per-user ``sum_m p_i^m - P_max``."""
    return np.asarray(P).sum(axis=-1) - p_max


def compute_lagrangian(inst, alloc, lam, config: NetworkConfig) -> float:
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ContractViolation("Lagrange multipliers must be nonnegative")
    P = _powers(alloc)
    value = -weighted_sum_rate(inst, P, config) + constraint_slack(P, config.p_max) @ lam
    return float(value) if np.ndim(value) == 0 else value
