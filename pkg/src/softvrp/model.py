"""Two-stage swap model: baseline scores pick the first node, attention picks the second.

Architecture (all weights in one flat float64 vector):

* embedding ``H0 = tanh(X We + be)`` of per-position features,
* one self-attention layer ``H = H0 + softmax(H0 Wq (H0 Wk)^T / sqrt(d)) H0 Wv``,
* per-position score head ``q_j = u . tanh(H_j W + b) + c`` (first-node Q-values),
* state-value head on the mean-pooled embedding (the REINFORCE baseline),
* policy head: ``logit_j = (H_i Pq) . (H_j Pk) / sqrt(d)`` for first node ``i``.

Gradients are written out by hand and checked against finite differences
in the test suite.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import EnvConfig, RouteState
from .errors import CheckpointError, NoActionError, NumericError
from .fastenv import BatchEval, BatchEvaluator
from .instance import ProblemInstance, Variant

FEATURES = (
    "x", "y", "demand_ratio", "tw_start", "tw_end", "arrival", "is_depot", "position",
    "prev_x", "prev_y", "next_x", "next_y", "route_load_ratio", "lateness",
)
FEATURE_WIDTH = len(FEATURES)
DEFAULT_WIDTH = 64


def build_features(instance: ProblemInstance, seqs: np.ndarray, ev: BatchEval) -> np.ndarray:
    """``(n, L, F)`` features for the interior positions of each sequence."""
    seqs = np.asarray(seqs)
    n, S = seqs.shape
    L = S - 2
    inner = seqs[:, 1:-1]
    coords = instance.coords
    X = np.zeros((n, L, FEATURE_WIDTH))
    X[..., 0:2] = coords[inner]
    is_depot = inner == 0
    variant = instance.variant
    if variant.capacitated:
        X[..., 2] = instance.demands[inner] / instance.capacity
        X[..., 12] = ev.loads[:, 1:-1] / instance.capacity
    if variant.timed:
        start = instance.tw_start[inner]
        end = np.where(is_depot, 0.0, instance.tw_end[inner])
        arr = ev.arrival[:, 1:-1]
        X[..., 3] = start
        X[..., 4] = end
        X[..., 5] = arr
        X[..., 13] = np.where(is_depot, 0.0, np.maximum(arr - end, 0.0))
    X[..., 6] = is_depot
    X[..., 7] = np.arange(1, L + 1) / S
    X[..., 8:10] = coords[seqs[:, :-2]]
    X[..., 10:12] = coords[seqs[:, 2:]]
    return X


def state_features(state: RouteState, env_config: EnvConfig | None = None) -> np.ndarray:
    seqs = np.array([state.sequence])
    ev = BatchEvaluator(state.instance, env_config or EnvConfig())(seqs, with_details=True)
    return build_features(state.instance, seqs, ev)[0]


# -- parameters --------------------------------------------------------------

def _block_shapes(d: int, f: int) -> dict[str, tuple[int, ...]]:
    return {
        "embed.W": (f, d),
        "embed.b": (d,),
        "attn.Wq": (d, d),
        "attn.Wk": (d, d),
        "attn.Wv": (d, d),
        "qhead.W": (d, d),
        "qhead.b": (d,),
        "qhead.u": (d,),
        "qhead.c": (1,),
        "vhead.W": (d, d),
        "vhead.b": (d,),
        "vhead.u": (d,),
        "vhead.c": (1,),
        "policy.Wq": (d, d),
        "policy.Wk": (d, d),
    }


POLICY_BLOCKS = ("policy.Wq", "policy.Wk")
BASELINE_BLOCKS = ("qhead.W", "qhead.b", "qhead.u", "qhead.c", "vhead.W", "vhead.b", "vhead.u", "vhead.c")
SHARED_BLOCKS = ("embed.W", "embed.b", "attn.Wq", "attn.Wk", "attn.Wv")


class ModelParams:
    """Named weight blocks that are views into one flat vector."""

    def __init__(self, width: int = DEFAULT_WIDTH, feature_width: int = FEATURE_WIDTH,
                 vector: np.ndarray | None = None, variant: str = "", seed: int | None = None):
        self.width = int(width)
        self.feature_width = int(feature_width)
        self.variant = variant
        self.seed = seed
        self.extra: dict = {}  # free-form checkpoint metadata
        self.shapes = _block_shapes(self.width, self.feature_width)
        self.size = sum(math.prod(s) for s in self.shapes.values())
        if vector is None:
            vector = np.zeros(self.size)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise CheckpointError(f"expected {self.size} parameters, got {vector.shape}")
        self.vector = vector
        self.blocks: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.shapes.items():
            k = math.prod(shape)
            self.blocks[name] = self.vector[offset:offset + k].reshape(shape)
            offset += k

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def to_vector(self) -> np.ndarray:
        return self.vector.copy()

    def with_vector(self, vector: np.ndarray) -> "ModelParams":
        return ModelParams(self.width, self.feature_width, np.array(vector, dtype=np.float64),
                           self.variant, self.seed)

    def copy(self) -> "ModelParams":
        return self.with_vector(self.vector)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.width, self.feature_width, None, self.variant, self.seed)

    def block_slices(self) -> dict[str, slice]:
        out, offset = {}, 0
        for name, shape in self.shapes.items():
            k = math.prod(shape)
            out[name] = slice(offset, offset + k)
            offset += k
        return out


def init_params(width: int = DEFAULT_WIDTH, seed: int = 0, feature_width: int = FEATURE_WIDTH,
                variant: str = "") -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every block."""
    rng = np.random.default_rng(seed)
    params = ModelParams(width, feature_width, variant=variant, seed=seed)
    for name, shape in params.shapes.items():
        fan_in = shape[0] if len(shape) == 2 else width
        if name == "embed.b":
            fan_in = feature_width
        bound = 1.0 / math.sqrt(fan_in)
        params[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


# -- forward -----------------------------------------------------------------

def _lin(a: np.ndarray, W: np.ndarray) -> np.ndarray:
    # 3-d by 2-d products as one 2-d BLAS call
    return (a.reshape(-1, a.shape[-1]) @ W).reshape(*a.shape[:-1], W.shape[-1])


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Forward:
    X: np.ndarray
    H0: np.ndarray
    Qa: np.ndarray
    Ka: np.ndarray
    Va: np.ndarray
    A: np.ndarray
    H: np.ndarray
    zq: np.ndarray
    q: np.ndarray  # (n, L) first-node scores
    m: np.ndarray
    zv: np.ndarray
    v: np.ndarray  # (n,) state value

    @property
    def pooled(self) -> np.ndarray:
        return self.m


def encode(params: ModelParams, X: np.ndarray) -> Forward:
    """Encoder plus both baseline heads for a batch ``(n, L, F)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    d = params.width
    H0 = np.tanh(_lin(X, params["embed.W"]) + params["embed.b"])
    Qa = _lin(H0, params["attn.Wq"])
    Ka = _lin(H0, params["attn.Wk"])
    Va = _lin(H0, params["attn.Wv"])
    A = _softmax(Qa @ Ka.transpose(0, 2, 1) / math.sqrt(d))
    H = H0 + A @ Va
    zq = np.tanh(_lin(H, params["qhead.W"]) + params["qhead.b"])
    q = zq @ params["qhead.u"] + params["qhead.c"][0]
    m = H.mean(axis=1)
    zv = np.tanh(m @ params["vhead.W"] + params["vhead.b"])
    v = zv @ params["vhead.u"] + params["vhead.c"][0]
    return Forward(X, H0, Qa, Ka, Va, A, H, zq, q, m, zv, v)


def partner_logits(params: ModelParams, H: np.ndarray, first: np.ndarray | None = None) -> np.ndarray:
    """Attention logits of every partner.

    With ``first`` of shape ``(n,)`` returns ``(n, L)`` for those first nodes;
    without it returns ``(n, L, L)`` for every first node. The first node's
    own entry is set to ``-inf``.
    """
    d = params.width
    K = _lin(H, params["policy.Wk"])
    n, L, _ = H.shape
    if first is None:
        Q = _lin(H, params["policy.Wq"])
        logits = Q @ K.transpose(0, 2, 1) / math.sqrt(d)
        idx = np.arange(L)
        logits[:, idx, idx] = -np.inf
        return logits
    rows = np.arange(n)
    qv = H[rows, first] @ params["policy.Wq"]
    logits = (K @ qv[:, :, None])[:, :, 0] / math.sqrt(d)
    logits[rows, first] = -np.inf
    return logits


def log_softmax_masked(logits: np.ndarray) -> np.ndarray:
    top = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- helpers on single states ---------------------------------------------------

@dataclass
class ActionDistribution:
    first_node_scores: np.ndarray  # per interior position
    second_node_probs: np.ndarray  # per interior position, zero at the first node
    first_pos: int  # sequence position

    def prob_of(self, position: int) -> float:
        return float(self.second_node_probs[position - 1])


def select_first_node(state: RouteState, params: ModelParams, mode: str = "greedy",
                      epsilon: float = 0.0, rng: np.random.Generator | None = None,
                      env_config: EnvConfig | None = None, scores: np.ndarray | None = None) -> int:
    """Sequence position of the first swap node.

    ``mode="greedy"`` takes the arg-max score (lowest position on ties);
    ``"epsilon_greedy"`` replaces it by a uniform interior position with
    probability ``epsilon``.
    """
    L = state.num_interior
    if L < 2:
        raise NoActionError(f"state {state} has fewer than two swappable positions")
    if scores is None:
        scores = encode(params, state_features(state, env_config)).q[0]
    if mode == "epsilon_greedy":
        rng = rng if rng is not None else np.random.default_rng()
        if rng.random() < epsilon:
            return int(rng.integers(L)) + 1
    elif mode != "greedy":
        raise ValueError(f"unknown selection mode {mode!r}")
    return int(np.argmax(scores)) + 1


def second_node_distribution(state: RouteState, first_pos: int, params: ModelParams,
                             env_config: EnvConfig | None = None) -> ActionDistribution:
    L = state.num_interior
    if not 1 <= first_pos <= L:
        raise NoActionError(f"first position {first_pos} is not interior")
    fwd = encode(params, state_features(state, env_config))
    logits = partner_logits(params, fwd.H, np.array([first_pos - 1]))[0]
    probs = np.exp(log_softmax_masked(logits))
    probs[first_pos - 1] = 0.0
    return ActionDistribution(fwd.q[0], probs, first_pos)


# -- losses and gradients ----------------------------------------------------

@dataclass
class GradResult:
    policy_objective: float  # sum_n w_n * adv_n * log pi(a_n | s_n)
    baseline_loss: float  # sum_n w_n * [(G_n - v_n)^2 + (G_n - q_n[first])^2]
    policy_grad: np.ndarray  # d policy_objective / d params (ascent direction)
    baseline_grad: np.ndarray  # d baseline_loss / d params
    advantages: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    baseline_mse: float
    direction: np.ndarray | None = None  # policy_grad - mix * baseline_grad, when requested


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_{n,l} a[n,l,:] outer b[n,l,:]`` through one BLAS call."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _encoder_backward(params: ModelParams, f: Forward, dH: np.ndarray, grads: dict) -> None:
    d = params.width
    scale = 1.0 / math.sqrt(d)
    dH0 = dH.copy()
    dA = dH @ f.Va.transpose(0, 2, 1)
    dVa = f.A.transpose(0, 2, 1) @ dH
    dS = f.A * (dA - (dA * f.A).sum(axis=-1, keepdims=True))
    dQa = dS @ f.Ka * scale
    dKa = dS.transpose(0, 2, 1) @ f.Qa * scale
    grads["attn.Wq"] += _outer_sum(f.H0, dQa)
    grads["attn.Wk"] += _outer_sum(f.H0, dKa)
    grads["attn.Wv"] += _outer_sum(f.H0, dVa)
    dH0 += _lin(dQa, params["attn.Wq"].T) + _lin(dKa, params["attn.Wk"].T) + _lin(dVa, params["attn.Wv"].T)
    dpre = dH0 * (1.0 - f.H0**2)
    grads["embed.W"] += _outer_sum(f.X, dpre)
    grads["embed.b"] += dpre.sum(axis=(0, 1))


def policy_objective_and_grad(params: ModelParams, f: Forward, first: np.ndarray, second: np.ndarray,
                              weights: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """``sum_n weights_n * log pi(second_n | first_n, s_n)`` and its gradient."""
    obj, g, dH, logp = _policy_head(params, f, first, second, weights)
    _encoder_backward(params, f, dH, g.blocks)
    return obj, g.vector, logp


def _policy_head(params, f, first, second, weights):
    n, L, d = f.H.shape
    rows = np.arange(n)
    scale = 1.0 / math.sqrt(d)
    K = _lin(f.H, params["policy.Wk"])
    Hf = f.H[rows, first]
    qv = Hf @ params["policy.Wq"]
    logits = (K @ qv[:, :, None])[:, :, 0] * scale
    logits[rows, first] = -np.inf
    logp_all = log_softmax_masked(logits)
    logp = logp_all[rows, second]
    obj = float(np.sum(weights * logp))

    probs = np.exp(logp_all)
    dlogits = -probs
    dlogits[rows, second] += 1.0
    dlogits *= weights[:, None]
    dlogits[rows, first] = 0.0

    g = params.zeros_like()
    grads = g.blocks
    dK = dlogits[:, :, None] * qv[:, None, :] * scale
    dqv = (dlogits[:, None, :] @ K)[:, 0] * scale
    grads["policy.Wk"] += _outer_sum(f.H, dK)
    grads["policy.Wq"] += Hf.T @ dqv
    dH = _lin(dK, params["policy.Wk"].T)
    dH[rows, first] += dqv @ params["policy.Wq"].T
    return obj, g, dH, logp


def baseline_loss_and_grad(params: ModelParams, f: Forward, first: np.ndarray, returns: np.ndarray,
                           weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted squared error of the state value and of the chosen first-node score."""
    loss, g, dH = _baseline_head(params, f, first, returns, weights)
    _encoder_backward(params, f, dH, g.blocks)
    return loss, g.vector


def _baseline_head(params, f, first, returns, weights):
    n, L, d = f.H.shape
    rows = np.arange(n)
    ev = f.v - returns
    eq = f.q[rows, first] - returns
    loss = float(np.sum(weights * (ev**2 + eq**2)))

    g = params.zeros_like()
    grads = g.blocks
    dv = 2.0 * weights * ev
    grads["vhead.u"] += f.zv.T @ dv
    grads["vhead.c"] += dv.sum()
    dprev = (dv[:, None] * params["vhead.u"]) * (1.0 - f.zv**2)
    grads["vhead.W"] += f.m.T @ dprev
    grads["vhead.b"] += dprev.sum(axis=0)
    dm = dprev @ params["vhead.W"].T
    dH = np.repeat((dm / L)[:, None, :], L, axis=1)

    # only the chosen first position carries a score error
    dqf = 2.0 * weights * eq
    zqf = f.zq[rows, first]
    grads["qhead.u"] += zqf.T @ dqf
    grads["qhead.c"] += dqf.sum()
    dpreq = (dqf[:, None] * params["qhead.u"]) * (1.0 - zqf**2)
    grads["qhead.W"] += f.H[rows, first].T @ dpreq
    grads["qhead.b"] += dpreq.sum(axis=0)
    dH[rows, first] += dpreq @ params["qhead.W"].T
    return loss, g, dH


def log_prob_and_grads(params: ModelParams, X: np.ndarray, first: np.ndarray, second: np.ndarray,
                       returns: np.ndarray, weights: np.ndarray | None = None,
                       subtract_baseline: bool = True, mix: float | None = None) -> GradResult:
    """Policy-gradient and baseline-regression gradients for a set of steps.

    ``X`` stacks the features of every visited state ``(n, L, F)``; ``first``
    and ``second`` are interior indices of the chosen nodes and ``returns``
    the constrained returns. The advantage is ``G - v(s)`` (held constant for
    the policy gradient) or plain ``G`` when ``subtract_baseline`` is off.
    ``weights`` default to ``1/n``.

    With ``mix`` set, only ``direction = policy_grad - mix * baseline_grad``
    is formed (one encoder backward pass instead of two) and the separate
    gradient fields are ``None``.
    """
    X = np.asarray(X, dtype=np.float64)
    first = np.asarray(first, dtype=np.int64)
    second = np.asarray(second, dtype=np.int64)
    returns = np.asarray(returns, dtype=np.float64)
    n = X.shape[0]
    weights = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    f = encode(params, X)
    values = f.v
    adv = returns - values if subtract_baseline else returns.copy()
    if mix is None:
        pobj, pgrad, logp = policy_objective_and_grad(params, f, first, second, weights * adv)
        bloss, bgrad = baseline_loss_and_grad(params, f, first, returns, weights)
        direction = None
        checks = (("policy", pgrad), ("baseline", bgrad))
    else:
        pobj, gp, dHp, logp = _policy_head(params, f, first, second, weights * adv)
        bloss, gb, dHb = _baseline_head(params, f, first, returns, weights)
        gp.vector -= mix * gb.vector
        _encoder_backward(params, f, dHp - mix * dHb, gp.blocks)
        pgrad = bgrad = None
        direction = gp.vector
        checks = (("combined", direction),)

    bad = ~(np.isfinite(logp) & np.isfinite(values) & np.isfinite(adv))
    if bad.any():
        step = int(np.argmax(bad))
        raise NumericError(f"non-finite log-prob/value at step {step}", step=step)
    for name, g in checks:
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite {name} gradient", step=None)
    mse = float(np.mean((values - returns) ** 2))
    return GradResult(pobj, bloss, pgrad, bgrad, adv, values, logp, mse, direction)


# -- checkpoints -------------------------------------------------------------

MAGIC = b"SOFTVRP1"


def save_params(params: ModelParams, path: "str | Path", extra: dict | None = None) -> None:
    """Header (JSON, length-prefixed) followed by little-endian float64 weights."""
    header = {
        "variant": params.variant,
        "width": params.width,
        "feature_width": params.feature_width,
        "seed": params.seed,
        "size": params.size,
    }
    if extra:
        header["extra"] = extra
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(params.vector.astype("<f8").tobytes())


def load_params(path: "str | Path", width: int | None = None, feature_width: int | None = None,
                variant: str | None = None) -> ModelParams:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(data[start:start + hlen])
    if width is not None and header["width"] != width:
        raise CheckpointError(f"width mismatch: file has {header['width']}, expected {width}")
    fw = FEATURE_WIDTH if feature_width is None else feature_width
    if header["feature_width"] != fw:
        raise CheckpointError(f"feature width mismatch: file has {header['feature_width']}, expected {fw}")
    if variant is not None and header["variant"] and Variant.parse(header["variant"]) != Variant.parse(variant):
        raise CheckpointError(f"variant mismatch: file has {header['variant']}, expected {variant}")
    vec = np.frombuffer(data[start + hlen:], dtype="<f8").astype(np.float64)
    if vec.size != header["size"]:
        raise CheckpointError(f"{path}: truncated parameter vector")
    params = ModelParams(header["width"], header["feature_width"], vec, header["variant"], header["seed"])
    params.extra = header.get("extra", {})
    return params


# -- rollout policy ----------------------------------------------------------

@dataclass
class _PolicyContext:
    X: np.ndarray
    q: np.ndarray  # (n, L)
    logp: np.ndarray  # (n, L, L) log p(second | first)
    cdf: np.ndarray  # (n, L, L), last entry exactly 1


class ModelPolicy:
    """Samples swaps from the network.

    The first node is the arg-max baseline score, replaced by a uniform
    interior position with probability ``epsilon``; the second node is
    sampled from the attention distribution.
    """

    def __init__(self, params: ModelParams, epsilon: float = 0.0):
        self.params = params
        self.epsilon = float(epsilon)

    def prepare(self, instance, seqs, ev):
        X = build_features(instance, seqs, ev)
        fwd = encode(self.params, X)
        logp = log_softmax_masked(partner_logits(self.params, fwd.H))
        cdf = np.cumsum(np.exp(logp), axis=-1)
        cdf /= cdf[..., -1:]
        return _PolicyContext(X, fwd.q, logp, cdf)

    def propose(self, ctx, rows, k, rng):
        n = len(rows)
        L = ctx.q.shape[1]
        first = np.repeat(np.argmax(ctx.q[rows], axis=1)[:, None], k, axis=1)
        if self.epsilon > 0:
            explore = rng.random((n, k)) < self.epsilon
            first = np.where(explore, rng.integers(L, size=(n, k)), first)
        r = rows[:, None]
        cdf = ctx.cdf[r, first]  # (n, k, L)
        u = 1.0 - rng.random((n, k))  # (0, 1]: a zero draw could land on the masked first node
        second = np.minimum((cdf < u[..., None]).sum(axis=-1), L - 1)
        return first, second, ctx.logp[r, first, second]
