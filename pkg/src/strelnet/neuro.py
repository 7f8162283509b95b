"""Stacked LSTM imitation controller, trained by backpropagation through time.

Shapes: sequences are time-major, ``(T, B, features)``.  Gate order in the
stacked weight matrices is input, forget, candidate, output.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .spatial import ConnectivityPolicy, adjacency_matrices

CHECKPOINT_VERSION = 1


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def input_dim(n_agents: int, dim: int, n_labels: int, adjacency: bool = True) -> int:
    return n_agents * dim + (n_agents * n_agents if adjacency else 0) + n_agents * n_labels


def encode_input(positions, adjacency, attributes: Sequence[str], labels: Sequence[str],
                 include_adjacency: bool = True) -> np.ndarray:
    """[positions row-major | adjacency row-major as 0/1 | one-hot attribute per agent]."""
    pos = np.asarray(positions, float)
    onehot = np.zeros((len(attributes), len(labels)))
    for i, a in enumerate(attributes):
        onehot[i, list(labels).index(a)] = 1.0
    parts = [pos.ravel()]
    if include_adjacency:
        parts.append(np.asarray(adjacency, float).ravel())
    parts.append(onehot.ravel())
    return np.concatenate(parts)


def encode_trace(positions, attributes, labels, policy: ConnectivityPolicy,
                 include_adjacency: bool = True) -> np.ndarray:
    """Inputs for every step of a (steps, N, dim) position array."""
    adj = adjacency_matrices(positions, policy) if include_adjacency else [None] * len(positions)
    return np.stack([encode_input(q, a, attributes, labels, include_adjacency)
                     for q, a in zip(positions, adj)])


@dataclass
class LstmModel:
    input_dim: int
    hidden: tuple
    output_dim: int
    params: dict
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None
    output_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_shift is None:
            self.input_shift = np.zeros(self.input_dim)
        if self.input_scale is None:
            self.input_scale = np.ones(self.input_dim)
        for name, shape in param_shapes(self.input_dim, self.hidden, self.output_dim).items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, "
                                 f"expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"parameter {name} is not finite")

    @property
    def layers(self) -> int:
        return len(self.hidden)


def param_shapes(n_in: int, hidden: Sequence[int], n_out: int) -> dict:
    shapes, prev = {}, n_in
    for i, h in enumerate(hidden):
        shapes[f"W{i}"] = (4 * h, prev + h)
        shapes[f"b{i}"] = (4 * h,)
        prev = h
    shapes["Wy"] = (n_out, prev)
    shapes["by"] = (n_out,)
    return shapes


def init_model(n_in: int, n_out: int, hidden: Sequence[int] = (64, 64, 64, 64),
               seed: int = 0, forget_bias: float = 1.0) -> LstmModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except the forget gate."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(n_in, hidden, n_out).items():
        if name.startswith("W"):
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    for i, h in enumerate(hidden):
        params[f"b{i}"][h:2 * h] = forget_bias
    return LstmModel(n_in, tuple(hidden), n_out, params)


def zero_model(n_in: int, n_out: int, hidden: Sequence[int]) -> LstmModel:
    return LstmModel(n_in, tuple(hidden), n_out,
                     {k: np.zeros(s) for k, s in param_shapes(n_in, hidden, n_out).items()})


# -- forward --------------------------------------------------------------------

def _cell(W, b, x, h, c):
    """One LSTM step; returns new (h, c) and the gate values for backprop."""
    n = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W.T + b
    i = _sigmoid(z[..., :n])
    f = _sigmoid(z[..., n:2 * n])
    g = np.tanh(z[..., 2 * n:3 * n])
    o = _sigmoid(z[..., 3 * n:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, g, o, tc)


def _normalize(model: LstmModel, x):
    return (x - model.input_shift) / model.input_scale


def initial_state(model: LstmModel, batch: Optional[int] = None):
    shape = (lambda h: (h,)) if batch is None else (lambda h: (batch, h))
    return [(np.zeros(shape(h)), np.zeros(shape(h))) for h in model.hidden]


def step(model: LstmModel, x, state, masks=None):
    """Advance every layer by one time step; returns (output, new state, cache)."""
    p = model.params
    inp = _normalize(model, np.asarray(x, float))
    new_state, caches = [], []
    for li in range(model.layers):
        if masks is not None and li > 0:
            inp = inp * masks[li - 1]
        h, c = state[li]
        h_new, c_new, gates = _cell(p[f"W{li}"], p[f"b{li}"], inp, h, c)
        caches.append((inp, h, c, gates))
        new_state.append((h_new, c_new))
        inp = h_new
    y = (inp @ p["Wy"].T + p["by"]) * model.output_scale
    return y, new_state, (caches, inp)


def forward(model: LstmModel, inputs, masks=None):
    """Predicted controls for a (T, in) or (T, B, in) sequence, from zero state."""
    xs = np.asarray(inputs, float)
    if xs.ndim not in (2, 3) or xs.shape[-1] != model.input_dim:
        raise ValueError(f"inputs must be (T, [B,] {model.input_dim}), got {xs.shape}")
    if xs.shape[0] < 1:
        raise ValueError("need at least one input step")
    state = initial_state(model, None if xs.ndim == 2 else xs.shape[1])
    ys, caches = [], []
    for x in xs:
        y, state, cache = step(model, x, state, masks)
        ys.append(y)
        caches.append(cache)
    return np.stack(ys), caches


# -- backward -------------------------------------------------------------------

def loss_and_grad(model: LstmModel, inputs, targets, masks=None):
    """Summed squared error over steps and samples, and its exact BPTT gradient."""
    ys, caches = forward(model, inputs, masks)
    targets = np.asarray(targets, float)
    err = ys - targets
    loss = float(np.sum(err * err))
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dy = 2.0 * err * model.output_scale                          # d loss / d readout
    L = model.layers
    dh_next = [np.zeros_like(caches[0][0][li][1]) for li in range(L)]
    dc_next = [np.zeros_like(caches[0][0][li][2]) for li in range(L)]
    for t in range(len(caches) - 1, -1, -1):
        layer_caches, top = caches[t]
        grads["Wy"] += _outer(dy[t], top)
        grads["by"] += _sum_batch(dy[t])
        dh = dy[t] @ p["Wy"] + dh_next[L - 1]
        for li in range(L - 1, -1, -1):
            inp, h_prev, c_prev, (i, f, g, o, tc) = layer_caches[li]
            n = h_prev.shape[-1]
            dc = dc_next[li] + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([dc * g * i * (1.0 - i),
                                 dc * c_prev * f * (1.0 - f),
                                 dc * i * (1.0 - g * g),
                                 dh * tc * o * (1.0 - o)], axis=-1)
            xh = np.concatenate([inp, h_prev], axis=-1)
            grads[f"W{li}"] += _outer(dz, xh)
            grads[f"b{li}"] += _sum_batch(dz)
            dxh = dz @ p[f"W{li}"]
            dc_next[li] = dc * f
            dh_next[li] = dxh[..., inp.shape[-1]:]
            if li > 0:
                dh = dxh[..., :inp.shape[-1]]
                if masks is not None:
                    dh = dh * masks[li - 1]
                dh = dh + dh_next[li - 1]
    return loss, grads


def _outer(a, b):
    return np.outer(a, b) if a.ndim == 1 else a.T @ b


def _sum_batch(a):
    return a if a.ndim == 1 else a.sum(axis=0)


# -- training -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 700
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 1.0
    optimizer: str = "adam"
    dropout: float = 0.0
    hidden: tuple = (64, 64, 64, 64)
    include_adjacency: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0 or not self.clip_norm > 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


def fit_normalization(model: LstmModel, inputs, output_scale: float) -> None:
    """Standardize inputs by dataset statistics; constant and 0/1 columns pass through."""
    x = np.asarray(inputs, float).reshape(-1, model.input_dim)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    keep = (sd > 1e-9) & ~np.all((x == 0) | (x == 1), axis=0)
    model.input_shift = np.where(keep, mu, 0.0)
    model.input_scale = np.where(keep, sd, 1.0)
    model.output_scale = float(output_scale)


def train(model: LstmModel, inputs, targets, cfg: TrainConfig = TrainConfig()):
    """Minimize the summed squared control error; returns the per-epoch mean loss."""
    xs = np.asarray(inputs, float)          # (T, S, in)
    ys = np.asarray(targets, float)         # (T, S, out)
    if xs.ndim != 3 or xs.shape[1] == 0:
        raise ValueError("training needs a non-empty (T, samples, features) input")
    if ys.shape[:2] != xs.shape[:2] or ys.shape[2] != model.output_dim:
        raise ValueError("targets do not match inputs / model output")
    rng = np.random.default_rng(cfg.seed)
    S = xs.shape[1]
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    t_adam = 0
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(S)
        total = 0.0
        for start in range(0, S, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = None
            if cfg.dropout > 0 and model.layers > 1:
                keep = 1.0 - cfg.dropout
                masks = [(rng.random((len(idx), h)) < keep) / keep for h in model.hidden[:-1]]
            loss, grads = loss_and_grad(model, xs[:, idx], ys[:, idx], masks)
            total += loss
            for k in grads:
                grads[k] /= len(idx)
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.clip_norm:
                for k in grads:
                    grads[k] *= cfg.clip_norm / norm
            t_adam += 1
            for k, g in grads.items():
                if cfg.optimizer == "sgd":
                    model.params[k] -= cfg.learning_rate * g
                    continue
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1 ** t_adam)
                vhat = v[k] / (1 - b2 ** t_adam)
                model.params[k] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
        curve.append(total / S)
    return curve


# -- closed-loop control ----------------------------------------------------------

class Controller:
    """Stateful incremental inference; each rollout owns one controller."""

    def __init__(self, model: LstmModel, lo=None, hi=None):
        self.model = model
        self.lo, self.hi = lo, hi
        self.reset()

    def reset(self):
        self.state = initial_state(self.model)

    def raw(self, x) -> np.ndarray:
        y, self.state, _ = step(self.model, np.asarray(x, float), self.state)
        return y

    def act(self, x) -> np.ndarray:
        y = self.raw(x)
        if self.lo is not None:
            y = np.clip(y, self.lo, self.hi)
        return y


def closed_loop(model: LstmModel, scenario, labels, include_adjacency: bool = True):
    """Roll the scenario forward with the network choosing the controls each step."""
    ctrl = list(scenario.controllable)
    shape = (len(ctrl), scenario.dim)
    lo = np.broadcast_to(scenario.control_lo, shape).ravel()
    hi = np.broadcast_to(scenario.control_hi, shape).ravel()
    c = Controller(model, lo, hi)
    q = scenario.initial_positions.copy()
    pos = [q.copy()]
    us = []
    for _ in range(scenario.horizon):
        adj = adjacency_matrices(q, scenario.connectivity) if include_adjacency else None
        u = c.act(encode_input(q, adj, scenario.attributes, labels, include_adjacency))
        u = u.reshape(shape)
        q = q.copy()
        q[ctrl] += u
        pos.append(q)
        us.append(u)
    return np.stack(pos), np.stack(us)


@dataclass(frozen=True)
class EvalReport:
    runs: int
    successes: int
    success_rate: Optional[float]
    mean_robustness: Optional[float]
    mean_inference_time: Optional[float]


def evaluate(model: LstmModel, problem, inits, labels, include_adjacency: bool = True
             ) -> EvalReport:
    """Closed-loop success rate over initial positions ``inits`` (each N x dim)."""
    from .spatial import TeamTrace
    from .synthesis import robustness_of_trace
    robs, times = [], []
    for q0 in inits:
        scn = problem.scenario.with_initial_positions(q0)
        t0 = time.perf_counter()
        pos, _ = closed_loop(model, scn, labels, include_adjacency)
        times.append(time.perf_counter() - t0)
        robs.append(robustness_of_trace(problem, TeamTrace(pos, scn.attributes)))
    if not robs:
        return EvalReport(0, 0, None, None, None)
    ok = sum(r >= problem.eps_min for r in robs)
    return EvalReport(len(robs), ok, ok / len(robs), float(np.mean(robs)),
                      float(np.mean(times)))


# -- checkpoints ------------------------------------------------------------------

def save(model: LstmModel, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "inputDim": model.input_dim,
        "hidden": list(model.hidden),
        "outputDim": model.output_dim,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in model.params.items()},
        "inputShift": model.input_shift.tolist(),
        "inputScale": model.input_scale.tolist(),
        "outputScale": model.output_scale,
        "meta": model.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load(path) -> LstmModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not a model checkpoint: {e}") from None
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    try:
        params = {k: np.array(v["data"], dtype=float).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        return LstmModel(doc["inputDim"], tuple(doc["hidden"]), doc["outputDim"], params,
                         np.array(doc["inputShift"]), np.array(doc["inputScale"]),
                         float(doc["outputScale"]), doc.get("meta", {}))
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{path}: malformed checkpoint: {e}") from None
