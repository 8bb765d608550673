"""Multi-channel WMMSE power allocation.

Block-coordinate descent on ``sum_m sum_i a_i (w e - ln w)`` over receiver
scalars ``u``, MSE weights ``w`` and square-root powers ``v``.  The ``v``
block is a separable convex quadratic per user under the budget
``sum_m v^2 <= P_max``; its multiplier is found by bisection.

Arrays use the allocation layout ``(..., D, M)``; gains are ``(..., M, D, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelInstance, NetworkConfig
from .errors import NumericFailure
from .rates import Allocation

MAX_BRACKET_DOUBLINGS = 100


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 500
    rel_tol: float = 1e-5
    bisect_tol: float = 1e-8
    bisect_max_steps: int = 100

    def __post_init__(self):
        if min(self.max_iters, self.rel_tol, self.bisect_tol, self.bisect_max_steps) <= 0:
            raise ValueError("solver options must all be positive")


@dataclass
class WmmseState:
    v: np.ndarray
    u: np.ndarray | None = None
    w: np.ndarray | None = None
    e: np.ndarray | None = None
    J: np.ndarray | None = None
    lam: np.ndarray | None = None
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _direct(g: np.ndarray) -> np.ndarray:
    return np.swapaxes(np.diagonal(g, axis1=-2, axis2=-1), -1, -2)


def received_energy(g: np.ndarray, v: np.ndarray, noise: float) -> np.ndarray:
    """``J_i^m = sum_j (g_ij^m v_j^m)^2 + noise``."""
    return np.einsum("...mij,...jm->...im", g * g, v * v) + noise


def u_step(g, v, noise):
    J = received_energy(g, v, noise)
    return _direct(g) * v / J, J


def w_step(g, u, v, J):
    e = u * u * J - 2.0 * u * _direct(g) * v + 1.0
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise NumericFailure("non-positive or non-finite MSE in w-update")
    return e, 1.0 / e


def mse_objective(g, u, w, v, noise, alpha) -> np.ndarray:
    """``sum a_i (w e - ln w)`` with ``e`` evaluated at the given ``u, v``."""
    J = received_energy(g, v, noise)
    e = u * u * J - 2.0 * u * _direct(g) * v + 1.0
    return np.einsum("...im,i->...", w * e - np.log(w), alpha)


def v_coefficients(g, u, w, alpha):
    """``v_i^m(lam) = B / (A + lam)``; returns ``(A, B)``."""
    aw = alpha[:, None] * w
    A = np.einsum("...mji,...jm->...im", g * g, aw * u * u)
    B = aw * u * _direct(g)
    return A, B


def v_of_lambda(A, B, lam):
    lam = np.asarray(lam)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(B > 0, B / (A + lam), 0.0)
    return v


def user_power(A, B, lam):
    v = v_of_lambda(A, B, lam)
    # near-silent links can push the unconstrained power to inf; that just means "binding"
    with np.errstate(over="ignore"):
        return np.sum(v * v, axis=-1)


def v_step(g, u, w, alpha, p_max, opts: SolverOptions):
    """Exact minimiser of the ``v`` block; returns ``(v, lam)``.

    Users whose unconstrained optimum fits the budget get ``lam = 0``.  For the
    rest, ``lam`` is bracketed by doubling from 1 and then bisected; the
    returned ``v`` always comes from the upper (feasible) end of the bracket.
    """
    A, B = v_coefficients(g, u, w, alpha)
    # B > 0 implies A > 0, so only silent entries need a safe denominator
    A = np.where(B > 0, A, 1.0)

    def power(lam):
        v = B / (A + lam[..., None])
        return np.einsum("...m,...m->...", v, v)

    lead = A.shape[:-1]
    lo = np.zeros(lead)
    hi = np.zeros(lead)
    with np.errstate(over="ignore", divide="ignore"):
        binding = power(lo) > p_max
        if binding.any():
            hi = np.where(binding, 1.0, 0.0)
            for _ in range(MAX_BRACKET_DOUBLINGS + 1):
                grow = binding & (power(hi) > p_max)
                if not grow.any():
                    break
                lo = np.where(grow, hi, lo)
                hi = np.where(grow, 2.0 * hi, hi)
            else:
                raise NumericFailure("multiplier bracket exceeded 2**100; degenerate channel inputs")
            for _ in range(opts.bisect_max_steps):
                active = binding & (p_max - power(hi) > opts.bisect_tol * p_max)
                if not active.any():
                    break
                mid = 0.5 * (lo + hi)
                over = power(mid) > p_max
                lo = np.where(active & over, mid, lo)
                hi = np.where(active & ~over, mid, hi)
    lam = np.where(binding, hi, 0.0)
    return B / (A + lam[..., None]), lam


def update_u(state: WmmseState, inst: ChannelInstance, config: NetworkConfig):
    state.u, state.J = u_step(inst.gains, state.v, config.noise_power)
    return state.u, state.J


def update_w(state: WmmseState, inst: ChannelInstance, config: NetworkConfig):
    state.e, state.w = w_step(inst.gains, state.u, state.v, state.J)
    return state.e, state.w


def update_v(state: WmmseState, inst: ChannelInstance, config: NetworkConfig,
             opts: SolverOptions | None = None):
    state.v, state.lam = v_step(inst.gains, state.u, state.w, config.alpha, config.p_max,
                                opts or SolverOptions())
    return state.v


def initial_v(shape, config: NetworkConfig) -> np.ndarray:
    return np.full(shape, np.sqrt(config.p_max / config.M))


def solve_batch(gains: np.ndarray, config: NetworkConfig, opts: SolverOptions | None = None,
                record_trace: bool = False):
    """Run the solver on ``(N, M, D, D)`` gains at once.

    Instances freeze individually when their relative objective change drops
    below tolerance.  Returns ``(P, iterations, traces)`` where ``traces`` is a
    list of per-instance objective sequences (empty lists unless requested).
    """
    opts = opts or SolverOptions()
    g = np.asarray(gains, dtype=np.float64)
    N, M, D = g.shape[0], g.shape[1], g.shape[2]
    noise, alpha, p_max = config.noise_power, config.alpha, config.p_max
    v = initial_v((N, D, M), config)
    u, J = u_step(g, v, noise)
    _, w = w_step(g, u, v, J)
    obj = mse_objective(g, u, w, v, noise, alpha)
    traces = [[float(o)] for o in obj] if record_trace else [[] for _ in range(N)]
    active = np.ones(N, dtype=bool)
    iters = np.zeros(N, dtype=int)
    for _ in range(opts.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        gi = g[idx]
        v_new, _ = v_step(gi, u[idx], w[idx], alpha, p_max, opts)
        obj_new = mse_objective(gi, u[idx], w[idx], v_new, noise, alpha)
        if not np.all(np.isfinite(obj_new)):
            raise NumericFailure("non-finite objective during WMMSE iteration")
        u_new, J_new = u_step(gi, v_new, noise)
        _, w_new = w_step(gi, u_new, v_new, J_new)
        v[idx], u[idx], w[idx] = v_new, u_new, w_new
        iters[idx] += 1
        done = np.abs(obj_new - obj[idx]) <= opts.rel_tol * np.abs(obj[idx])
        if record_trace:
            for k, o in zip(idx, obj_new):
                traces[k].append(float(o))
        obj[idx] = obj_new
        active[idx[done]] = False
    return v * v, iters, traces


def solve(inst: ChannelInstance, config: NetworkConfig, opts: SolverOptions | None = None):
    """Solve one instance; returns ``(Allocation, WmmseState)``.

    ``state.trace`` holds the weighted-MSE objective after initialisation and
    after every ``v``-update, evaluated with the ``u, w`` that produced it.
    """
    opts = opts or SolverOptions()
    g = inst.gains
    state = WmmseState(v=initial_v((inst.D, inst.M), config))
    update_u(state, inst, config)
    update_w(state, inst, config)
    state.trace.append(float(mse_objective(g, state.u, state.w, state.v, config.noise_power, config.alpha)))
    for _ in range(opts.max_iters):
        update_v(state, inst, config, opts)
        obj = float(mse_objective(g, state.u, state.w, state.v, config.noise_power, config.alpha))
        if not np.isfinite(obj):
            raise NumericFailure(f"non-finite objective at iteration {state.iterations + 1}")
        prev = state.trace[-1]
        state.trace.append(obj)
        state.iterations += 1
        update_u(state, inst, config)
        update_w(state, inst, config)
        if abs(obj - prev) <= opts.rel_tol * abs(prev):
            state.converged = True
            break
    return Allocation.from_powers(state.v * state.v, config.p_max), state
