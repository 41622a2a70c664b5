"""Dense network kernel: tanh MLPs with exact reverse-mode gradients, categorical
distribution helpers, closed-form KL and an Adam optimizer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_FLOOR = math.log(1e-20)
CHECKPOINT_SCHEMA_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ----------------------------------------------------------------- params

def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0):
    lim = scale * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_mlp(rng, sizes, prefix: str, params: dict, last_scale: float = 1.0) -> None:
    for i in range(len(sizes) - 1):
        scale = last_scale if i == len(sizes) - 2 else 1.0
        W, b = init_linear(rng, sizes[i], sizes[i + 1], scale)
        params[f"{prefix}.{i}.W"] = W
        params[f"{prefix}.{i}.b"] = b


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten_params(params: dict) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


# ------------------------------------------------------------------- MLP

def mlp_forward(params: dict, x: np.ndarray, prefix: str, n_layers: int, final_activation: bool = True):
    """Affine+tanh stack. Returns (output, cache)."""
    x = np.asarray(x, dtype=np.float64)
    acts = [x]
    h = x
    for i in range(n_layers):
        W = params[f"{prefix}.{i}.W"]
        if h.shape[-1] != W.shape[0]:
            raise ShapeError(f"{prefix}.{i}: input dim {h.shape[-1]} != {W.shape[0]}")
        h = h @ W + params[f"{prefix}.{i}.b"]
        if i < n_layers - 1 or final_activation:
            h = np.tanh(h)
        acts.append(h)
    return h, (acts, final_activation)


def mlp_backward(params: dict, cache, dout: np.ndarray, prefix: str, grads: dict, need_input_grad: bool = False):
    """Accumulates parameter gradients into ``grads``; returns d(input) if requested."""
    acts, final_activation = cache
    n_layers = len(acts) - 1
    g = dout
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1 or final_activation:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[f"{prefix}.{i}.W"] += acts[i].reshape(-1, acts[i].shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grads[f"{prefix}.{i}.b"] += g.reshape(-1, g.shape[-1]).sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ params[f"{prefix}.{i}.W"].T
    return g if need_input_grad else None


def dropout_mask(rng: np.random.Generator | None, shape, rate: float):
    if rng is None or rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------- categorical

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(eq=False)
class CategoricalDist:
    """Batch of categorical distributions over K tokens (leading axes are batch)."""

    logits: np.ndarray
    _logp: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)

    @classmethod
    def from_log_probs(cls, logp: np.ndarray) -> "CategoricalDist":
        logp = np.asarray(logp, dtype=np.float64)
        return cls(logp.copy(), logp)

    @property
    def K(self) -> int:
        return int(self.logits.shape[-1])

    @property
    def log_probs(self) -> np.ndarray:
        if self._logp is None:
            self._logp = log_softmax(self.logits)
        return self._logp

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def log_prob(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.K):
            raise IndexError(f"token id out of range [0, {self.K})")
        lp = self.log_probs
        if lp.ndim == 1:
            return lp[ids]
        return np.take_along_axis(lp, ids[..., None], axis=-1)[..., 0]

    def entropy(self) -> np.ndarray:
        lp = self.log_probs
        p = np.exp(lp)
        return -(p * np.where(p > 0, lp, 0.0)).sum(axis=-1)

    def sample(self, rng: np.random.Generator, u: np.ndarray | None = None) -> np.ndarray:
        """Inverse-CDF sampling; one uniform per distribution."""
        p = self.probs
        cdf = np.cumsum(p, axis=-1)
        if u is None:
            u = rng.random(p.shape[:-1])
        u = np.asarray(u)[..., None] * cdf[..., -1:]
        idx = (cdf <= u).sum(axis=-1)
        return np.minimum(idx, self.K - 1).astype(np.int64)

    def mode(self) -> np.ndarray:
        return np.argmax(self.logits, axis=-1).astype(np.int64)

    def __getitem__(self, idx) -> "CategoricalDist":
        return CategoricalDist(self.logits[idx], None if self._logp is None else self._logp[idx])


def categorical_ops(dist: CategoricalDist, mode: str, *, seed=None, rng=None, token_id=None):
    if mode == "sample":
        rng = rng if rng is not None else np.random.default_rng(seed)
        return dist.sample(rng)
    if mode == "log_prob":
        return dist.log_prob(token_id)
    if mode == "entropy":
        return dist.entropy()
    raise ValueError(f"unknown mode {mode!r}")


def kl_from_log_probs(logp_ref: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """sum_a p_ref(a) (log p_ref(a) - max(log q(a), log 1e-20))."""
    if logp_ref.shape[-1] != logq.shape[-1]:
        raise ShapeError(f"K mismatch: {logp_ref.shape[-1]} vs {logq.shape[-1]}")
    p = np.exp(logp_ref)
    term = np.where(p > 0, p * (logp_ref - np.maximum(logq, LOG_FLOOR)), 0.0)
    return np.maximum(term.sum(axis=-1), 0.0)


def kl_categorical(p_ref: CategoricalDist, q: CategoricalDist) -> np.ndarray:
    return kl_from_log_probs(p_ref.log_probs, q.log_probs)


def kl_grad_wrt_logits(logp_ref: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """d KL(p_ref || softmax(z)) / dz with the floor applied to log q."""
    p = np.exp(logp_ref)
    q = np.exp(logq)
    w = np.where(logq > LOG_FLOOR, p, 0.0)
    return w.sum(axis=-1, keepdims=True) * q - w


def entropy_grad_wrt_logits(logp: np.ndarray) -> np.ndarray:
    p = np.exp(logp)
    H = -(p * logp).sum(axis=-1, keepdims=True)
    return -p * (logp + H)


# ----------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(zeros_like_params(params), zeros_like_params(params))


def clip_by_global_norm(grads: dict, clip_norm: float | None) -> tuple[dict, float]:
    norm = global_norm(grads)
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / (norm + 1e-12)
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, clip_norm: float | None = None) -> float:
    """In-place Adam update after global-norm clipping. Returns the pre-clip gradient norm."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {k}")
    grads, norm = clip_by_global_norm(grads, clip_norm)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k in sorted(params):
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        params[k] -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return norm


# ------------------------------------------------------------- checkpoints

def _arr_to_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _arr_from_json(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path, arch: dict, params: dict, opt: AdamState | None = None, rng_state: dict | None = None, extra=None):
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "arch": arch,
        "params": {k: _arr_to_json(params[k]) for k in sorted(params)},
        "optimizer": None
        if opt is None
        else {
            "t": opt.t,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "m": {k: _arr_to_json(opt.m[k]) for k in sorted(opt.m)},
            "v": {k: _arr_to_json(opt.v[k]) for k in sorted(opt.v)},
        },
        "rng": rng_state,
        "extra": extra,
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema_version {d.get('schema_version')!r}")
    out = {
        "arch": d["arch"],
        "params": {k: _arr_from_json(v) for k, v in d["params"].items()},
        "optimizer": None,
        "rng": d.get("rng"),
        "extra": d.get("extra"),
    }
    o = d.get("optimizer")
    if o is not None:
        out["optimizer"] = AdamState(
            {k: _arr_from_json(v) for k, v in o["m"].items()},
            {k: _arr_from_json(v) for k, v in o["v"].items()},
            int(o["t"]),
            float(o["beta1"]),
            float(o["beta2"]),
            float(o["eps"]),
        )
    return out
