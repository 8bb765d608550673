"""Unsupervised primal-dual training and evaluation of the message-passing allocator.

The loss of a batch is the mean Lagrangian
``-sum_i a_i R_i(P) + sum_i lam_i (sum_m q_i^m - P_max)`` where ``P`` is the
post-processed allocation and ``q`` is either the raw network output
(``dual_mode="pre"``) or ``P`` itself (``"post"``).  Weights take a gradient
step on it; the shared multipliers take a projected ascent step on the
batch-mean constraint violation.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gnn
from .baselines import icp_powers
from .channel import Dataset, NetworkConfig
from .errors import ContractViolation, NumericFailure, TrainingFailure
from .rates import FEASIBILITY_SLACK, sum_rate_grad, weighted_sum_rate

log = logging.getLogger(__name__)

POLICIES = ("jcpgnn-m", "icp")


@dataclass
class DualState:
    lam: np.ndarray
    step: float

    @classmethod
    def zeros(cls, D: int, step: float) -> "DualState":
        return cls(np.zeros(D), step)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    lambda_lr: float = 1e-3
    optimizer: str = "sgd"
    dual_mode: str = "pre"
    seed: int = 0
    val_every: int = 1
    rounds: int = 3
    policy: str = "jcpgnn-m"
    aggregation: str = "max"
    feature_mode: str = "log"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.val_every < 1:
            raise ContractViolation("epochs, batch_size and val_every must be positive")
        if self.lr < 0 or self.lambda_lr < 0:
            raise ContractViolation("step sizes must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.dual_mode not in ("pre", "post"):
            raise ContractViolation(f"unknown dual mode {self.dual_mode!r}")
        if self.policy not in POLICIES:
            raise ContractViolation(f"unknown policy {self.policy!r}")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    initial_val_sum_rate: float = float("nan")

    COLUMNS = ("epoch", "train_lagrangian", "val_sum_rate", "violation", "mean_lambda", "wall_time")

    def deterministic_view(self) -> list[tuple]:
        """Everything except wall-clock time."""
        return [tuple(r[c] for c in self.COLUMNS if c != "wall_time") for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([r[c] if c == "epoch" else repr(float(r[c])) for c in self.COLUMNS])


def allocate(model: gnn.GnnModel, p_hat: np.ndarray, p_max: float, policy: str = "jcpgnn-m") -> np.ndarray:
    """Turn raw network output into a feasible allocation for the given policy."""
    if policy == "icp":
        return icp_powers(np.clip(p_hat / p_max, 0.0, 1.0), p_max, p_hat.shape[-1])
    return gnn.post_process(p_hat, p_max)


def loss(p_hat: np.ndarray, P: np.ndarray, gains: np.ndarray, dual: DualState,
         config: NetworkConfig, mode: str = "pre", policy: str = "jcpgnn-m"):
    """Batch-mean Lagrangian and its seeds for ``gnn.backward``.

    Returns ``(value, grad_P, grad_p_hat, violation)`` with ``violation`` the
    per-sample ``sum_m q_i^m - P_max`` of shape ``(B, D)``.
    """
    B = p_hat.shape[0]
    rate = weighted_sum_rate(gains, P, config)
    drate = sum_rate_grad(gains, P, config)
    if policy == "icp":
        # P = p_hat / M: the budget holds by construction, the rate is the whole loss
        return float(-rate.mean()), None, -drate / (B * p_hat.shape[-1]), np.zeros(p_hat.shape[:2])
    q = p_hat if mode == "pre" else P
    violation = q.sum(axis=-1) - config.p_max
    value = float(np.mean(-rate + violation @ dual.lam))
    lam_seed = np.broadcast_to(dual.lam[:, None] / B, P.shape)
    grad_P = -drate / B
    grad_p_hat = None
    if mode == "pre":
        grad_p_hat = lam_seed
    else:
        grad_P = grad_P + lam_seed
    return value, grad_P, grad_p_hat, violation


def dual_update(dual: DualState, mean_violation: np.ndarray) -> DualState:
    lam = np.maximum(0.0, dual.lam + dual.step * np.asarray(mean_violation))
    return DualState(lam, dual.step)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            m = self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k in sorted(params):
            params[k] -= self.lr * grads[k]


def mean_sum_rate(model: gnn.GnnModel, data: Dataset, policy: str = "jcpgnn-m") -> float:
    if len(data) == 0:
        return float("nan")
    p_max = data.config.p_max
    P = allocate(model, gnn.predict(model, data.gains, p_max), p_max, policy)
    return float(np.mean(weighted_sum_rate(data.gains, P, data.config)))


def new_model(train_data: Dataset, tc: TrainConfig) -> gnn.GnnModel:
    mean, std = gnn.norm_stats(train_data.gains, tc.feature_mode)
    return gnn.init_model(np.random.default_rng([tc.seed, 0]), rounds=tc.rounds,
                          norm_mean=mean, norm_std=std, p_max=train_data.config.p_max,
                          aggregation=tc.aggregation, feature_mode=tc.feature_mode)


def train(train_data: Dataset, val_data: Dataset | None, model_init: gnn.GnnModel | None,
          tc: TrainConfig):
    """Primal-dual training; returns ``(best_validation_model, TrainLog)``."""
    config = train_data.config
    if val_data is not None and (val_data.config.D, val_data.config.M) != (config.D, config.M):
        raise ContractViolation("training and validation data must share D and M")
    N = len(train_data)
    if N == 0 or tc.batch_size > N:
        raise ContractViolation(f"batch size {tc.batch_size} exceeds dataset size {N}")
    model = model_init.copy() if model_init is not None else new_model(train_data, tc)
    model.metadata.update(seed=tc.seed, train_config=asdict(tc),
                          dataset={"D": config.D, "M": config.M, "num_samples": N, "seed": config.seed})
    p_max = config.p_max
    feats = gnn.model_features(model, train_data.gains)
    opt = Adam(tc.lr) if tc.optimizer == "adam" else SGD(tc.lr)
    dual = DualState.zeros(config.D, tc.lambda_lr)
    shuffle = np.random.default_rng([tc.seed, 1])
    trainlog = TrainLog()
    best = model.copy()
    best_rate = -np.inf
    if val_data is not None:
        best_rate = trainlog.initial_val_sum_rate = mean_sum_rate(model, val_data, tc.policy)
    for epoch in range(1, tc.epochs + 1):
        start = time.perf_counter()
        order = shuffle.permutation(N)
        losses, violations = [], []
        for b, lo in enumerate(range(0, N, tc.batch_size)):
            idx = np.sort(order[lo:lo + tc.batch_size])
            bf = gnn.GraphFeatures(feats.nodes[idx], feats.edges[idx], feats.neighbors)
            gains = train_data.gains[idx]
            try:
                p_hat, cache = gnn.forward(model, bf, p_max)
            except NumericFailure as exc:
                raise TrainingFailure(f"diverged at epoch {epoch}, batch {b}: {exc}") from exc
            P = allocate(model, p_hat, p_max, tc.policy)
            value, grad_P, grad_p_hat, viol = loss(p_hat, P, gains, dual, config, tc.dual_mode, tc.policy)
            if not np.isfinite(value):
                raise TrainingFailure(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = gnn.backward(model, cache, grad_P, grad_p_hat)
            opt.step(model.params, grads)
            if tc.policy != "icp":
                dual = dual_update(dual, viol.mean(axis=0))
            losses.append(value)
            violations.append(np.maximum(viol, 0.0).mean())
        val_rate = float("nan")
        if val_data is not None and epoch % tc.val_every == 0:
            val_rate = mean_sum_rate(model, val_data, tc.policy)
            if val_rate > best_rate:
                best_rate, best = val_rate, model.copy()
        row = dict(epoch=epoch, train_lagrangian=float(np.mean(losses)), val_sum_rate=val_rate,
                   violation=float(np.mean(violations)), mean_lambda=float(dual.lam.mean()),
                   wall_time=time.perf_counter() - start)
        trainlog.rows.append(row)
        log.info("epoch %d: lagrangian %.4f, val rate %.4f, lambda %.4g",
                 epoch, row["train_lagrangian"], val_rate, row["mean_lambda"])
    if val_data is None:
        best = model
    best.metadata["best_val_sum_rate"] = None if not np.isfinite(best_rate) else best_rate
    return best, trainlog


@dataclass
class EvalReport:
    mean_sum_rate: float
    std_sum_rate: float
    violations: int
    time_per_instance: float
    rows: list[dict]

    CSV_COLUMNS = ("index", "sum_rate", "max_user_power", "feasible")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([r["index"], repr(r["sum_rate"]), repr(r["max_user_power"]), int(r["feasible"])])


def summarize(gains: np.ndarray, P: np.ndarray, config: NetworkConfig, elapsed: float) -> EvalReport:
    """Rates and feasibility audit for a stack of allocations."""
    n = gains.shape[0]
    rates_ = weighted_sum_rate(gains, P, config) if n else np.zeros(0)
    totals = P.sum(axis=-1).max(axis=-1) if n else np.zeros(0)
    feasible = (totals <= config.p_max * (1 + FEASIBILITY_SLACK)) & np.all(P >= 0, axis=(-1, -2))
    rows = [dict(index=k, sum_rate=float(rates_[k]), max_user_power=float(totals[k]),
                 feasible=bool(feasible[k])) for k in range(n)]
    return EvalReport(
        mean_sum_rate=float(rates_.mean()) if n else float("nan"),
        std_sum_rate=float(rates_.std()) if n else float("nan"),
        violations=int(n - feasible.sum()),
        time_per_instance=elapsed / n if n else float("nan"),
        rows=rows,
    )


def evaluate(model: gnn.GnnModel, data: Dataset, config: NetworkConfig | None = None,
             policy: str = "jcpgnn-m") -> EvalReport:
    config = config or data.config
    if (config.D, config.M) != (data.config.D, data.config.M):
        raise ContractViolation("evaluation config does not match the dataset shape")
    start = time.perf_counter()
    P = allocate(model, gnn.predict(model, data.gains, config.p_max), config.p_max, policy)
    elapsed = time.perf_counter() - start
    return summarize(data.gains, P, config, elapsed)
