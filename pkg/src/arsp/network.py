"""Feed-forward quantile network with a shared encoder and two heads.

Layout::

    encoder   phi   : obs -> tanh(64) -> tanh(64)
    decision  psi_a : features -> |A| * M quantiles
    predictor psi_s : [features(o_t), features(o_t+1)] -> one output group per opponent

Gradients are computed by hand and checked against finite differences in the
test-suite.  All tensors are float64 views into one flat vector, so Adam,
target-network syncs and checksums each work on a single array.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

ENCODER = ("enc_w1", "enc_b1", "enc_w2", "enc_b2")
DECISION = ("dec_w", "dec_b")


@lru_cache(maxsize=None)
def _layout(obs_dim, n_actions, n_quantiles, hidden, opponent_actions):
    shapes = [("enc_w1", (obs_dim, hidden)), ("enc_b1", (hidden,)),
              ("enc_w2", (hidden, hidden)), ("enc_b2", (hidden,)),
              ("dec_w", (hidden, n_actions * n_quantiles)), ("dec_b", (n_actions * n_quantiles,))]
    for j, n in enumerate(opponent_actions):
        shapes += [(f"pred_w{j}", (2 * hidden, n)), (f"pred_b{j}", (n,))]
    slots, pos = [], 0
    for key, shape in shapes:
        size = math.prod(shape)
        slots.append((key, shape, pos, pos + size))
        pos += size
    return tuple(slots), pos


def _views(flat, slots):
    return {key: flat[lo:hi].reshape(shape) for key, shape, lo, hi in slots}


class NetworkParams:
    """All tensors of one network, stored as views into a single flat vector."""

    def __init__(self, obs_dim, n_actions, n_quantiles, hidden, opponent_actions,
                 continuous_opponents=False, flat=None):
        self.obs_dim = int(obs_dim)
        self.n_actions = int(n_actions)
        self.n_quantiles = int(n_quantiles)
        self.hidden = int(hidden)
        self.opponent_actions = tuple(int(n) for n in opponent_actions)
        self.continuous_opponents = bool(continuous_opponents)
        self.slots, size = _layout(self.obs_dim, self.n_actions, self.n_quantiles, self.hidden,
                                   self.opponent_actions)
        if flat is None:
            flat = np.zeros(size)
        elif flat.shape != (size,):
            raise ValueError(f"flat parameter vector has shape {flat.shape}, expected ({size},)")
        self.flat = flat
        self.arrays = _views(flat, self.slots)

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(key, shape) for key, shape, _, _ in self.slots]

    @property
    def encoder_keys(self) -> tuple[str, ...]:
        return ENCODER

    @property
    def decision_keys(self) -> tuple[str, ...]:
        return DECISION

    @property
    def predictor_keys(self) -> tuple[str, ...]:
        keys = []
        for j in range(len(self.opponent_actions)):
            keys += [f"pred_w{j}", f"pred_b{j}"]
        return tuple(keys)

    def _like(self, flat) -> "NetworkParams":
        return NetworkParams(self.obs_dim, self.n_actions, self.n_quantiles, self.hidden,
                             self.opponent_actions, self.continuous_opponents, flat)

    def zeros_like(self) -> "NetworkParams":
        return self._like(np.zeros_like(self.flat))

    def copy(self) -> "NetworkParams":
        return self._like(self.flat.copy())

    def assign(self, other: "NetworkParams") -> None:
        """Copy values from ``other`` in place (used for target-network sync)."""
        self.flat[...] = other.flat

    def meta(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
            "n_quantiles": self.n_quantiles,
            "hidden": self.hidden,
            "opponent_actions": list(self.opponent_actions),
            "continuous_opponents": self.continuous_opponents,
        }


def init_params(obs_dim, action_count, opponent_count, opponent_action_count, M,
                seed, hidden=64, continuous_opponents=False) -> NetworkParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``.

    ``opponent_action_count`` is an int shared by all opponents or a sequence
    with one entry per opponent (action dimension when continuous).
    """
    if min(obs_dim, action_count, opponent_count, M, hidden) <= 0:
        raise ValueError("network dimensions must be positive")
    if np.isscalar(opponent_action_count):
        opp = (int(opponent_action_count),) * opponent_count
    else:
        opp = tuple(int(n) for n in opponent_action_count)
        if len(opp) != opponent_count:
            raise ValueError("need one action count per opponent")
    rng = np.random.default_rng(seed)
    params = NetworkParams(obs_dim, action_count, M, hidden, opp, continuous_opponents)
    for key, shape in params.shapes:
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params.arrays[key][...] = rng.uniform(-limit, limit, size=shape)
    return params


def _as_batch(params, obs):
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    if single:
        obs = obs[None]
    if obs.shape[-1] != params.obs_dim:
        raise ValueError(f"observation has {obs.shape[-1]} features, encoder expects {params.obs_dim}")
    return obs, single


def _encode(a, x):
    h1 = np.tanh(x @ a["enc_w1"] + a["enc_b1"])
    h2 = np.tanh(h1 @ a["enc_w2"] + a["enc_b2"])
    return h1, h2


def forward_quantiles(params: NetworkParams, observation) -> np.ndarray:
    """Quantile estimates of shape (|A|, M), or (B, |A|, M) for a batch."""
    x, single = _as_batch(params, observation)
    a = params.arrays
    _, h = _encode(a, x)
    out = (h @ a["dec_w"] + a["dec_b"]).reshape(len(x), params.n_actions, params.n_quantiles)
    return out[0] if single else out


def _predict(params, h_now, h_next):
    a = params.arrays
    z = np.concatenate([h_now, h_next], axis=1)
    return z, [z @ a[f"pred_w{j}"] + a[f"pred_b{j}"] for j in range(len(params.opponent_actions))]


def forward_opponent_logits(params: NetworkParams, obs, next_obs) -> list[np.ndarray]:
    """Per-opponent logits (or continuous action predictions) from both observations."""
    x, single = _as_batch(params, obs)
    y, _ = _as_batch(params, next_obs)
    a = params.arrays
    _, h_now = _encode(a, x)
    _, h_next = _encode(a, y)
    _, outs = _predict(params, h_now, h_next)
    return [o[0] for o in outs] if single else outs


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    """Activations of one joint forward pass, consumed by :func:`backprop_joint`."""

    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    batch: int
    quantiles: np.ndarray
    z: np.ndarray | None = None
    opponent_outputs: list[np.ndarray] | None = None


@dataclass
class GradientBundle:
    """Gradients shaped like the parameters (``grads.arrays`` / ``grads.flat``)."""

    grads: NetworkParams
    quantile_loss: float = 0.0
    aux_loss: float = 0.0


def forward_joint(params: NetworkParams, obs, next_obs=None) -> ForwardCache:
    """Forward pass for training.

    The encoder runs once on ``obs`` stacked with ``next_obs``; the decision
    head reads the first half, the predictor head both halves.  Pass
    ``next_obs=None`` to skip the predictor entirely.
    """
    x, _ = _as_batch(params, obs)
    B = len(x)
    if next_obs is not None:
        y, _ = _as_batch(params, next_obs)
        x = np.concatenate([x, y], axis=0)
    a = params.arrays
    h1, h2 = _encode(a, x)
    q = (h2[:B] @ a["dec_w"] + a["dec_b"]).reshape(B, params.n_actions, params.n_quantiles)
    cache = ForwardCache(x, h1, h2, B, q)
    if next_obs is not None:
        cache.z, cache.opponent_outputs = _predict(params, h2[:B], h2[B:])
    return cache


def opponent_loss(params: NetworkParams, outputs, opponent_actions):
    """Averaged per-opponent loss and gradients w.r.t. each output group.

    Discrete heads use softmax cross-entropy against integer actions; continuous
    heads use mean squared error.  ``opponent_actions`` has shape (B, n_opp) for
    discrete heads and (B, n_opp, dim) for continuous ones.
    """
    if opponent_actions is None:
        raise ValueError("opponent actions are required for the opponent-modelling loss")
    acts = np.asarray(opponent_actions)
    n_opp = len(outputs)
    B = outputs[0].shape[0]
    if acts.shape[0] != B or (acts.ndim > 1 and acts.shape[1] != n_opp):
        raise ValueError(f"expected opponent actions for {B} samples and {n_opp} opponents")
    acts = acts.reshape(B, n_opp, *acts.shape[2:])
    total = 0.0
    grads = []
    for j, out in enumerate(outputs):
        if params.continuous_opponents:
            diff = out - acts[:, j].reshape(out.shape)
            total += np.mean(diff * diff)
            grads.append(2.0 * diff / (diff.size * n_opp))
        else:
            idx = acts[:, j].astype(int)
            z = out - out.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total += -logp[np.arange(B), idx].mean()
            g = np.exp(logp)
            g[np.arange(B), idx] -= 1.0
            grads.append(g / (B * n_opp))
    return total / n_opp, grads


def backprop_joint(params: NetworkParams, cache: ForwardCache, quantile_grads,
                   opponent_actions=None, aux_weight: float = 1.0,
                   quantile_loss: float = 0.0) -> GradientBundle:
    """Exact gradient of ``J + aux_weight * L``.

    ``quantile_grads`` is dJ/dquantiles with the shape of ``cache.quantiles``
    (or ``None`` for the auxiliary loss alone).  The quantile term reaches
    (encoder, decision); the auxiliary term reaches (encoder, predictor).
    """
    if cache is None:
        raise ValueError("backprop_joint needs the cache of a forward pass")
    a = params.arrays
    B = cache.batch
    bundle = params.zeros_like()
    grads = bundle.arrays
    dh2 = np.zeros_like(cache.h2)

    if quantile_grads is not None:
        dq = np.asarray(quantile_grads, dtype=float).reshape(B, -1)
        np.matmul(cache.h2[:B].T, dq, out=grads["dec_w"])
        grads["dec_b"][...] = dq.sum(axis=0)
        dh2[:B] = dq @ a["dec_w"].T

    aux = 0.0
    if aux_weight != 0.0 and opponent_actions is not None:
        if cache.opponent_outputs is None:
            raise ValueError("forward pass ran without next observations; no predictor cache")
        aux, douts = opponent_loss(params, cache.opponent_outputs, opponent_actions)
        dz = np.zeros_like(cache.z)
        for j, d in enumerate(douts):
            d = aux_weight * d
            np.matmul(cache.z.T, d, out=grads[f"pred_w{j}"])
            grads[f"pred_b{j}"][...] = d.sum(axis=0)
            dz += d @ a[f"pred_w{j}"].T
        H = params.hidden
        dh2[:B] += dz[:, :H]
        dh2[B:] += dz[:, H:]

    dz2 = dh2 * (1.0 - cache.h2 * cache.h2)
    np.matmul(cache.h1.T, dz2, out=grads["enc_w2"])
    grads["enc_b2"][...] = dz2.sum(axis=0)
    dz1 = (dz2 @ a["enc_w2"].T) * (1.0 - cache.h1 * cache.h1)
    np.matmul(cache.x.T, dz1, out=grads["enc_w1"])
    grads["enc_b1"][...] = dz1.sum(axis=0)
    return GradientBundle(bundle, quantile_loss, aux)


@dataclass
class OptimizerState:
    """Adam moments over the flat parameter vector."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                              None if self.m is None else self.m.copy(),
                              None if self.v is None else self.v.copy())


def key_mask(params: NetworkParams, keys) -> np.ndarray:
    """Boolean mask over ``params.flat`` selecting the tensors named in ``keys``."""
    mask = params.zeros_like()
    for k in keys:
        mask.arrays[k][...] = 1.0
    return mask.flat.astype(bool)


_ALL = np.empty(0, dtype=np.int64)


@njit(cache=True)
def _adam(x, g, m, v, idx, b1, b2, lr_t, eps):
    # idx empty means every coordinate; nothing is written if any gradient is non-finite
    n = x.size if idx.size == 0 else idx.size
    for c in range(n):
        i = c if idx.size == 0 else idx[c]
        if not np.isfinite(g[i]):
            return False
    for c in range(n):
        i = c if idx.size == 0 else idx[c]
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        x[i] -= lr_t * m[i] / (math.sqrt(v[i]) + eps)
    return True


def optimizer_step(params: NetworkParams, grads, state: OptimizerState, keys=None):
    """One Adam update, applied in place; returns ``(params, state)``.

    ``grads`` is a :class:`NetworkParams` of gradients (or a dict of arrays).
    When ``keys`` is given, every other tensor is left untouched: its gradient
    is ignored and its moments are not advanced.
    """
    if isinstance(grads, dict):
        g = params.zeros_like()
        for k, v in grads.items():
            g.arrays[k][...] = v
        grads = g
    g = grads.flat
    if state.m is None:
        state.m = np.zeros_like(params.flat)
        state.v = np.zeros_like(params.flat)
    if keys is None:
        idx = _ALL
    else:
        idx = np.flatnonzero(key_mask(params, keys))
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr * math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    if not _adam(params.flat, g, state.m, state.v, idx, b1, b2, lr_t, state.eps):
        bad = [k for k, v in grads.arrays.items() if not np.all(np.isfinite(v))]
        raise FloatingPointError(f"non-finite gradient in {bad} at optimizer step {t}")
    state.step = t
    return params, state


def params_digest(params: NetworkParams) -> str:
    h = hashlib.sha256(json.dumps(params.meta(), sort_keys=True).encode())
    h.update(params.flat.tobytes())
    return h.hexdigest()


def save_params(path, params: NetworkParams, config_hash: str = "") -> None:
    """Write all tensors plus shape metadata to an ``.npz`` file (bit-exact)."""
    meta = dict(params.meta(), config_hash=config_hash)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **params.arrays)


def load_params(path) -> tuple[NetworkParams, str]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        config_hash = meta.pop("config_hash", "")
        params = NetworkParams(**meta)
        for k in data.files:
            if k != "__meta__":
                params.arrays[k][...] = data[k]
    return params, config_hash
