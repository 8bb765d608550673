"""Per-channel message-passing network for multi-channel power allocation.

Each channel is a complete graph over the D pairs.  Node (i, m) carries a
scalar state x (initially 0), its transformed direct gain, and for every
neighbour j the edge feature ``[g_ij, g_ji]``.  One round:

    msg_ij = relu(W2 relu(W1 [x_i, V_i, E_ij] + b1) + b2)      4 -> 16 -> 32
    n_i    = max_j msg_ij                                        (or sum / mean)
    x_i    = p_max * sigmoid(alpha([x_i, n_i]))                  33 -> 16 -> 8 -> 1

with weights shared by all rounds, nodes and channels.  Forward and backward
are written out by hand in numpy; shapes are batched as ``(G, D, ...)`` where
G runs over (sample, channel) graphs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, CorruptionError, FormatError, NumericFailure

PHI_SIZES = (4, 16, 32)
ALPHA_SIZES = (33, 16, 8, 1)
AGGREGATIONS = ("max", "sum", "mean")
FEATURE_MODES = ("log", "raw")
LOG_FLOOR = 1e-12
CHECKPOINT_FORMAT = "mcra-gnn"


def _layer_names(prefix: str, sizes: tuple[int, ...]):
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        yield f"{prefix}.{k}", fan_in, fan_out


def param_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {}
    for prefix, sizes in (("phi", PHI_SIZES), ("alpha", ALPHA_SIZES)):
        for name, fan_in, fan_out in _layer_names(prefix, sizes):
            shapes[f"{name}.W"] = (fan_in, fan_out)
            shapes[f"{name}.b"] = (fan_out,)
    return shapes


@dataclass
class GnnModel:
    params: dict[str, np.ndarray]
    rounds: int = 3
    norm_mean: float = 0.0
    norm_std: float = 1.0
    p_max: float = 1.0
    aggregation: str = "max"
    feature_mode: str = "log"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ContractViolation(f"unknown aggregation {self.aggregation!r}")
        if self.feature_mode not in FEATURE_MODES:
            raise ContractViolation(f"unknown feature mode {self.feature_mode!r}")
        if self.rounds < 1:
            raise ContractViolation("need at least one message-passing round")
        if not self.norm_std > 0:
            raise ContractViolation("normalization std must be positive")
        check_params(self.params)

    def copy(self) -> "GnnModel":
        return GnnModel({k: v.copy() for k, v in self.params.items()}, self.rounds, self.norm_mean,
                        self.norm_std, self.p_max, self.aggregation, self.feature_mode,
                        dict(self.metadata))


def check_params(params: dict[str, np.ndarray]) -> None:
    expected = param_shapes()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ContractViolation(f"parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ContractViolation(f"layer {name} has shape {params[name].shape}, expected {shape}")


def init_model(rng: np.random.Generator, rounds: int = 3, **kwargs) -> GnnModel:
    """Uniform weights with half-width sqrt(6 / (fan_in + fan_out)); zero biases."""
    params = {}
    for prefix, sizes in (("phi", PHI_SIZES), ("alpha", ALPHA_SIZES)):
        for name, fan_in, fan_out in _layer_names(prefix, sizes):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[f"{name}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"{name}.b"] = np.zeros(fan_out)
    return GnnModel(params, rounds=rounds, **kwargs)


def zero_model(rounds: int = 3, **kwargs) -> GnnModel:
    return GnnModel({k: np.zeros(s) for k, s in param_shapes().items()}, rounds=rounds, **kwargs)


def transform_gains(gains: np.ndarray, mean: float, std: float, mode: str = "log") -> np.ndarray:
    if mode == "raw":
        return (gains - mean) / std
    return (np.log10(gains + LOG_FLOOR) - mean) / std


def norm_stats(gains: np.ndarray, mode: str = "log") -> tuple[float, float]:
    """Dataset-level mean and std of the pre-standardisation features."""
    if mode == "raw":
        return 0.0, 1.0
    z = np.log10(np.asarray(gains) + LOG_FLOOR)
    std = float(z.std())
    return float(z.mean()), std if std > 0 else 1.0


@dataclass
class GraphFeatures:
    """Node features ``(B, M, D)``, edge features ``(B, M, D, D-1, 2)``, neighbour table ``(D, D-1)``.

    ``edges[b, m, i, k] = [t(g_ij), t(g_ji)]`` with ``j = neighbors[i, k]``.
    """

    nodes: np.ndarray
    edges: np.ndarray
    neighbors: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.nodes.shape


def neighbor_table(D: int) -> np.ndarray:
    """Row i lists every j != i in increasing order."""
    if D == 1:
        return np.zeros((1, 0), dtype=np.int64)
    idx = np.arange(D)
    return np.array([np.delete(idx, i) for i in idx])


def build_features(gains: np.ndarray, mean: float = 0.0, std: float = 1.0,
                   mode: str = "log") -> GraphFeatures:
    g = np.asarray(gains, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    D = g.shape[-1]
    t = transform_gains(g, mean, std, mode)
    nodes = np.diagonal(t, axis1=-2, axis2=-1).copy()
    nbr = neighbor_table(D)
    rows = np.arange(D)[:, None]
    edges = np.stack([t[..., rows, nbr], np.swapaxes(t, -1, -2)[..., rows, nbr]], axis=-1)
    return GraphFeatures(nodes, edges, nbr)


def model_features(model: GnnModel, gains: np.ndarray) -> GraphFeatures:
    return build_features(gains, model.norm_mean, model.norm_std, model.feature_mode)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_finite(arr, where: str):
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"non-finite activation at {where}")


def _dense(x, W, b=None, relu=False):
    """``x @ W + b`` as one 2-D GEMM over all leading axes, optionally rectified.

    Bias and rectification are applied in place: fresh temporaries of this
    size cost more in page faults than the arithmetic.
    """
    out = x.reshape(-1, W.shape[0]) @ W
    if b is not None:
        out += b
    if relu:
        np.maximum(out, 0.0, out=out)
    return out.reshape(x.shape[:-1] + (W.shape[1],))


def _static_message_input(prm: dict, V: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Part of the first message pre-activation that does not depend on ``x``: ``(G, D, K, 16)``."""
    W = prm["phi.0.W"]
    return _dense(E, W[2:], prm["phi.0.b"]) + V[:, :, None, None] * W[1]


def _forward_rounds(round_params: list[dict], feats: GraphFeatures, p_max: float, aggregation: str,
                    keep: bool = True):
    B, M, D = feats.nodes.shape
    G, K = B * M, D - 1
    V = feats.nodes.reshape(G, D)
    E = feats.edges.reshape(G, D, K, 2)
    x = np.zeros((G, D))
    caches = []
    static = {}
    for s, prm in enumerate(round_params, start=1):
        # tied rounds share one dict, so the x-free part is computed once
        if id(prm) not in static:
            static[id(prm)] = _static_message_input(prm, V, E)
        # activations only: relu(h) > 0 exactly where h > 0, so they double as backward masks
        a1 = static[id(prm)] + x[:, :, None, None] * prm["phi.0.W"][0]
        np.maximum(a1, 0.0, out=a1)
        msg = _dense(a1, prm["phi.1.W"], prm["phi.1.b"], relu=True)
        _check_finite(msg, f"round {s}, message layer")
        if K == 0:
            n = np.zeros((G, D, PHI_SIZES[-1]))
        elif aggregation == "max":
            n = msg.max(axis=2)
        elif aggregation == "sum":
            n = msg.sum(axis=2)
        else:
            n = msg.mean(axis=2)
        inp2 = np.concatenate([x[:, :, None], n], axis=-1)
        r1 = _dense(inp2, prm["alpha.0.W"], prm["alpha.0.b"], relu=True)
        r2 = _dense(r1, prm["alpha.1.W"], prm["alpha.1.b"], relu=True)
        z = _dense(r2, prm["alpha.2.W"], prm["alpha.2.b"])
        _check_finite(z, f"round {s}, update layer")
        sig = _sigmoid(z[..., 0])
        if keep:
            caches.append(dict(x=x, a1=a1, msg=msg, inp2=inp2, r1=r1, r2=r2, sig=sig))
        x = p_max * sig
    p_hat = np.swapaxes(x.reshape(B, M, D), -1, -2)  # (B, D, M)
    return p_hat, caches


@dataclass
class ForwardCache:
    rounds: list[dict]
    p_hat: np.ndarray
    p_max: float
    shape: tuple[int, int, int]
    aggregation: str
    feats: GraphFeatures | None = None


def forward(model: GnnModel, feats: GraphFeatures, p_max: float | None = None,
            round_params: list[dict] | None = None, keep_cache: bool = True):
    """Pre-normalisation powers ``(B, D, M)`` in ``[0, p_max]`` and the cache for ``backward``.

    ``round_params`` overrides the tied weights with one parameter dict per
    round (used to check gradient accumulation across rounds).  Inference can
    pass ``keep_cache=False``; the returned cache then cannot be back-propagated.
    """
    p_max = model.p_max if p_max is None else p_max
    if round_params is None:
        round_params = [model.params] * model.rounds
    # non-finite activations are caught explicitly per layer, so numpy's warnings are redundant
    with np.errstate(invalid="ignore", over="ignore"):
        p_hat, caches = _forward_rounds(round_params, feats, p_max, model.aggregation, keep_cache)
    return p_hat, ForwardCache(caches, p_hat, p_max, feats.nodes.shape, model.aggregation, feats)


def _infer_max(model: GnnModel, feats: GraphFeatures, p_max: float, rows: int = 2048) -> np.ndarray:
    """Cache-free forward for max aggregation, equal to ``forward`` up to rounding.

    Edges are laid out neighbour-major so the max over neighbours is a reduction
    over contiguous slabs, processed ``rows`` at a time in reused buffers.  The
    second message layer's bias and ReLU are applied after the max, which is
    exact because both are monotone.
    """
    B, M, D = feats.nodes.shape
    GD, K = B * M * D, D - 1
    prm = model.params
    W0, W1, b1 = prm["phi.0.W"], prm["phi.1.W"], prm["phi.1.b"]
    width = W1.shape[1]
    static = np.moveaxis(feats.edges.reshape(GD, K, 2), 1, 0) @ W0[2:]     # (K, GD, 16)
    static += feats.nodes.reshape(GD, 1) * W0[1] + prm["phi.0.b"]
    x = np.zeros(GD)
    kc = max(1, rows // max(GD, 1))
    a1 = np.empty((min(kc, K), GD, W0.shape[1]))
    h2 = np.empty((min(kc, K), GD, width))
    part = np.empty((GD, width))
    for s in range(1, model.rounds + 1):
        n = np.zeros((GD, width))
        if K:
            xw = x[:, None] * W0[0]
            for lo in range(0, K, kc):
                hi = min(K, lo + kc)
                a, h = a1[:hi - lo], h2[:hi - lo]
                np.add(static[lo:hi], xw, out=a)
                np.maximum(a, 0.0, out=a)
                np.matmul(a.reshape(-1, a.shape[-1]), W1, out=h.reshape(-1, width))
                if lo == 0:
                    np.max(h, axis=0, out=n)
                else:
                    np.max(h, axis=0, out=part)
                    np.maximum(n, part, out=n)
            n += b1
            np.maximum(n, 0.0, out=n)
        _check_finite(n, f"round {s}, message layer")
        r1 = _dense(np.concatenate([x[:, None], n], axis=-1), prm["alpha.0.W"], prm["alpha.0.b"], relu=True)
        r2 = _dense(r1, prm["alpha.1.W"], prm["alpha.1.b"], relu=True)
        z = _dense(r2, prm["alpha.2.W"], prm["alpha.2.b"])
        _check_finite(z, f"round {s}, update layer")
        x = p_max * _sigmoid(z[:, 0])
    return np.swapaxes(x.reshape(B, M, D), -1, -2)


def post_process(p_hat: np.ndarray, p_max: float) -> np.ndarray:
    """Scale down rows whose total exceeds the budget; leave the rest untouched."""
    total = p_hat.sum(axis=-1, keepdims=True)
    over = total > p_max
    scale = np.where(over, p_max / np.where(over, total, 1.0), 1.0)
    return p_hat * scale


def post_process_backward(p_hat: np.ndarray, grad_P: np.ndarray, p_max: float) -> np.ndarray:
    total = p_hat.sum(axis=-1, keepdims=True)
    over = total > p_max
    safe = np.where(over, total, 1.0)
    inner = grad_P - np.sum(grad_P * p_hat, axis=-1, keepdims=True) / safe
    return np.where(over, (p_max / safe) * inner, grad_P)


def _outer(a, b):
    """``sum over rows of a^T b`` with all leading axes flattened."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _backward_rounds(round_params: list[dict], cache: ForwardCache, grad_p_hat: np.ndarray,
                     feats: GraphFeatures):
    B, M, D = cache.shape
    G, K = B * M, D - 1
    V = feats.nodes.reshape(G, D)
    E = feats.edges.reshape(G, D, K, 2)
    dx = np.swapaxes(grad_p_hat, -1, -2).reshape(G, D)
    grads = [None] * len(round_params)
    width = PHI_SIZES[-1]
    for s in range(len(round_params) - 1, -1, -1):
        prm, c = round_params[s], cache.rounds[s]
        g = {}
        sig = c["sig"]
        dz = (dx * cache.p_max * sig * (1.0 - sig))[..., None]
        g["alpha.2.W"] = _outer(c["r2"], dz)
        g["alpha.2.b"] = dz.sum(axis=(0, 1))
        dk2 = (dz @ prm["alpha.2.W"].T) * (c["r2"] > 0)
        g["alpha.1.W"] = _outer(c["r1"], dk2)
        g["alpha.1.b"] = dk2.sum(axis=(0, 1))
        dk1 = _dense(dk2, prm["alpha.1.W"].T) * (c["r1"] > 0)
        g["alpha.0.W"] = _outer(c["inp2"], dk1)
        g["alpha.0.b"] = dk1.sum(axis=(0, 1))
        dinp2 = _dense(dk1, prm["alpha.0.W"].T)
        dx_prev = dinp2[..., 0]
        dn = dinp2[..., 1:]
        if K == 0:
            dmsg = np.zeros((G, D, 0, width))
        elif cache.aggregation == "max":
            # first maximum wins, matching the lowest-index tie rule
            arg = np.argmax(c["msg"], axis=2)
            dmsg = np.zeros((G, D, K, width))
            np.put_along_axis(dmsg, arg[:, :, None, :], dn[:, :, None, :], axis=2)
        elif cache.aggregation == "sum":
            dmsg = np.broadcast_to(dn[:, :, None, :], (G, D, K, width))
        else:
            dmsg = np.broadcast_to(dn[:, :, None, :] / K, (G, D, K, width))
        dh2 = dmsg * (c["msg"] > 0)
        g["phi.1.W"] = _outer(c["a1"], dh2)
        g["phi.1.b"] = dh2.sum(axis=(0, 1, 2))
        dh1 = _dense(dh2, prm["phi.1.W"].T) * (c["a1"] > 0)
        # first-layer input is [x_i, V_i, E_ij]; the node columns are constant over neighbours
        dh1_node = dh1.sum(axis=2)
        W0 = np.empty_like(prm["phi.0.W"])
        W0[0] = c["x"].ravel() @ dh1_node.reshape(-1, dh1.shape[-1])
        W0[1] = V.ravel() @ dh1_node.reshape(-1, dh1.shape[-1])
        W0[2:] = _outer(E, dh1)
        g["phi.0.W"] = W0
        g["phi.0.b"] = dh1_node.sum(axis=(0, 1))
        dx = dx_prev + dh1_node @ prm["phi.0.W"][0]
        grads[s] = g
    return grads


def backward(model: GnnModel, cache: ForwardCache | None, grad_P: np.ndarray | None,
             grad_p_hat: np.ndarray | None = None, round_params: list[dict] | None = None,
             per_round: bool = False):
    """Reverse-mode gradient of a loss with respect to every weight.

    ``grad_P`` is dLoss/dP for the post-processed powers; ``grad_p_hat`` adds
    any direct dependence on the pre-normalisation output.  The scaling branch
    of post-processing is taken as fixed at the forward point.
    """
    if cache is None or not cache.rounds:
        raise ContractViolation("backward needs the cache from a forward pass")
    total = np.zeros_like(cache.p_hat)
    if grad_P is not None:
        total = total + post_process_backward(cache.p_hat, grad_P, cache.p_max)
    if grad_p_hat is not None:
        total = total + grad_p_hat
    if round_params is None:
        round_params = [model.params] * len(cache.rounds)
    grads = _backward_rounds(round_params, cache, total, cache.feats)
    if per_round:
        return grads
    summed = {k: np.zeros_like(v) for k, v in model.params.items()}
    for g in grads:
        for k, v in g.items():
            summed[k] += v
    return summed


def infer(model: GnnModel, feats: GraphFeatures, p_max: float | None = None) -> np.ndarray:
    """Forward pass without a backward cache; the fast path for deployment."""
    p_max = model.p_max if p_max is None else p_max
    with np.errstate(invalid="ignore", over="ignore"):
        if model.aggregation == "max":
            return _infer_max(model, feats, p_max)
        return _forward_rounds([model.params] * model.rounds, feats, p_max, model.aggregation, keep=False)[0]


def predict(model: GnnModel, gains: np.ndarray, p_max: float | None = None,
            chunk: int = 64) -> np.ndarray:
    """Pre-normalisation outputs for a ``(N, M, D, D)`` stack, computed in chunks."""
    g = np.asarray(gains)
    if g.ndim == 3:
        g = g[None]
    out = [infer(model, model_features(model, g[k:k + chunk]), p_max)
           for k in range(0, g.shape[0], chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, g.shape[-1], g.shape[1]))


def save_model(model: GnnModel, path: str | os.PathLike) -> None:
    layers = {}
    for prefix, sizes in (("phi", PHI_SIZES), ("alpha", ALPHA_SIZES)):
        layers[prefix] = [
            {"W": model.params[f"{name}.W"].tolist(), "b": model.params[f"{name}.b"].tolist()}
            for name, _, _ in _layer_names(prefix, sizes)
        ]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "architecture": {
            "phi": list(PHI_SIZES), "alpha": list(ALPHA_SIZES),
            "aggregation": model.aggregation, "feature_mode": model.feature_mode,
            "hidden_activation": "relu", "output_activation": "sigmoid",
        },
        "rounds": model.rounds,
        "weights": layers,
        "normalization": {"mean": model.norm_mean, "std": model.norm_std},
        "p_max": model.p_max,
        "metadata": model.metadata,
    }
    try:
        text = json.dumps(doc, allow_nan=False)
    except ValueError as exc:
        raise CorruptionError(f"refusing to save non-finite weights to {path}") from exc
    with open(path, "w") as fh:
        fh.write(text)


def _finite(value, what: str, path) -> float:
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        raise CorruptionError(f"{path}: {what} is not a finite number")
    return float(value)


def load_model(path: str | os.PathLike) -> GnnModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON document ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    for key in ("architecture", "rounds", "weights", "normalization", "p_max"):
        if key not in doc:
            raise FormatError(f"{path}: missing {key!r}")
    arch = doc["architecture"]
    if list(arch.get("phi", [])) != list(PHI_SIZES) or list(arch.get("alpha", [])) != list(ALPHA_SIZES):
        raise FormatError(f"{path}: unsupported architecture {arch}")
    norm = doc["normalization"]
    if not isinstance(norm, dict) or "mean" not in norm or "std" not in norm:
        raise FormatError(f"{path}: normalization stats missing")
    params = {}
    for prefix, sizes in (("phi", PHI_SIZES), ("alpha", ALPHA_SIZES)):
        entries = doc["weights"].get(prefix)
        if not isinstance(entries, list) or len(entries) != len(sizes) - 1:
            raise FormatError(f"{path}: {prefix} must have {len(sizes) - 1} layers")
        for (name, fan_in, fan_out), entry in zip(_layer_names(prefix, sizes), entries):
            try:
                W = np.asarray(entry["W"], dtype=np.float64)
                b = np.asarray(entry["b"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: layer {name} is malformed") from exc
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise FormatError(
                    f"{path}: layer {name} has shapes {W.shape}/{b.shape}, expected {(fan_in, fan_out)}/{(fan_out,)}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise CorruptionError(f"{path}: layer {name} holds non-finite weights")
            params[f"{name}.W"], params[f"{name}.b"] = W, b
    try:
        return GnnModel(
            params, rounds=int(doc["rounds"]),
            norm_mean=_finite(norm["mean"], "normalization mean", path),
            norm_std=_finite(norm["std"], "normalization std", path),
            p_max=_finite(doc["p_max"], "p_max", path),
            aggregation=arch.get("aggregation", "max"),
            feature_mode=arch.get("feature_mode", "log"),
            metadata=doc.get("metadata", {}),
        )
    except ContractViolation as exc:
        raise FormatError(f"{path}: {exc}") from exc
