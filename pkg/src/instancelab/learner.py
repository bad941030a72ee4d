"""Hand-written function approximators: recurrent encoder, heads, BPTT, Adam.

The encoder is a single-layer tanh recurrence over (observation one-hot,
scaled reward, previous-action one-hot); each subset m owns a softmax policy
head and a scalar value head on top of the shared hidden state. Gradients
are computed by explicit backpropagation through time and are verified
against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .env import PomdpModel
from .errors import NonFiniteError, UsageError

DEFAULT_WIDTH = 32


@dataclass
class EncoderParams:
    """Shared recurrent belief encoder."""

    w_obs: np.ndarray      # (d, O)
    w_reward: np.ndarray   # (d,)
    w_action: np.ndarray   # (d, A+1); index A is the "no previous action" slot
    w_hidden: np.ndarray   # (d, d)
    bias: np.ndarray       # (d,)
    reward_scale: float

    @property
    def width(self) -> int:
        return self.w_hidden.shape[0]


@dataclass
class HeadParams:
    """Per-subset policy and value heads over the shared hidden state."""

    policy_w: np.ndarray   # (M, A, d)
    policy_b: np.ndarray   # (M, A)
    value_w: np.ndarray    # (M, d)
    value_b: np.ndarray    # (M,)

    @property
    def num_subsets(self) -> int:
        return self.policy_w.shape[0]

    @property
    def num_actions(self) -> int:
        return self.policy_w.shape[1]


PARAM_KEYS = ("w_obs", "w_reward", "w_action", "w_hidden", "bias",
              "policy_w", "policy_b", "value_w", "value_b")


def params_as_dict(theta: EncoderParams, heads: HeadParams) -> dict:
    return {
        "w_obs": theta.w_obs, "w_reward": theta.w_reward,
        "w_action": theta.w_action, "w_hidden": theta.w_hidden,
        "bias": theta.bias,
        "policy_w": heads.policy_w, "policy_b": heads.policy_b,
        "value_w": heads.value_w, "value_b": heads.value_b,
    }


def zero_grads_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten_params(params: dict) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in PARAM_KEYS])


def unflatten_params(flat: np.ndarray, template: dict) -> dict:
    out, pos = {}, 0
    for k in PARAM_KEYS:
        size = template[k].size
        out[k] = flat[pos:pos + size].reshape(template[k].shape).copy()
        pos += size
    return out


def set_params(theta: EncoderParams, heads: HeadParams, values: dict) -> None:
    theta.w_obs = values["w_obs"]
    theta.w_reward = values["w_reward"]
    theta.w_action = values["w_action"]
    theta.w_hidden = values["w_hidden"]
    theta.bias = values["bias"]
    heads.policy_w = values["policy_w"]
    heads.policy_b = values["policy_b"]
    heads.value_w = values["value_w"]
    heads.value_b = values["value_b"]


def _glorot(stream: np.random.Generator, shape, fan_in: int, fan_out: int):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return stream.uniform(-lim, lim, size=shape)


def init_params(model: PomdpModel, num_subsets: int, seed: int,
                width: int = DEFAULT_WIDTH):
    """Glorot-uniform weights, zero biases, reward scaled by 1/R_max."""
    d, O, A = width, model.observation_space, model.num_actions
    theta = EncoderParams(
        w_obs=_glorot(rng.stream(seed, "init-w_obs"), (d, O), O, d),
        w_reward=_glorot(rng.stream(seed, "init-w_reward"), (d,), 1, d),
        w_action=_glorot(rng.stream(seed, "init-w_action"), (d, A + 1), A + 1, d),
        w_hidden=_glorot(rng.stream(seed, "init-w_hidden"), (d, d), d, d),
        bias=np.zeros(d),
        reward_scale=1.0 / max(abs(model.max_reward), 1e-12),
    )
    heads = HeadParams(
        policy_w=np.stack([
            _glorot(rng.stream(seed, "init-policy_w", m), (A, d), d, A)
            for m in range(num_subsets)]),
        policy_b=np.zeros((num_subsets, A)),
        value_w=np.stack([
            _glorot(rng.stream(seed, "init-value_w", m), (d,), d, 1)
            for m in range(num_subsets)]),
        value_b=np.zeros(num_subsets),
    )
    return theta, heads


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def encode_step(theta: EncoderParams, observation: int, reward: float,
                prev_action: int, prev_hidden: np.ndarray) -> np.ndarray:
    """hidden = tanh(W_o o + w_r r + W_a a_prev + W_h h_prev + b)."""
    if not (0 <= observation < theta.w_obs.shape[1]):
        raise UsageError(f"observation {observation} out of range")
    if not (0 <= prev_action < theta.w_action.shape[1]):
        raise UsageError(f"prev_action {prev_action} out of range")
    z = (theta.w_obs[:, observation]
         + theta.w_reward * (reward * theta.reward_scale)
         + theta.w_action[:, prev_action]
         + theta.w_hidden @ prev_hidden
         + theta.bias)
    return np.tanh(z)


def encode_batch(theta: EncoderParams, observations: np.ndarray,
                 rewards: np.ndarray, prev_actions: np.ndarray,
                 prev_hidden: np.ndarray) -> np.ndarray:
    """Vectorized encode_step over a batch: inputs (B,), hidden (B, d)."""
    z = (theta.w_obs[:, observations].T
         + np.outer(rewards * theta.reward_scale, theta.w_reward)
         + theta.w_action[:, prev_actions].T
         + prev_hidden @ theta.w_hidden.T
         + theta.bias)
    return np.tanh(z)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def policy_probs(heads: HeadParams, m: int, hidden: np.ndarray) -> np.ndarray:
    """Softmax policy of subset m; strictly positive and normalized."""
    return softmax(heads.policy_w[m] @ hidden + heads.policy_b[m])


def value_estimate(heads: HeadParams, m: int, hidden: np.ndarray) -> float:
    return float(heads.value_w[m] @ hidden + heads.value_b[m])


def forward_hidden_sequence(theta: EncoderParams, observations, rewards_in,
                            prev_actions) -> np.ndarray:
    """Hidden states b_0..b_T for one episode.

    Index t consumes (o_t, r_t, a_{t-1}); callers pass r_0 = 0 and the
    reserved no-action index at t = 0. Returns (T+1, d).
    """
    d = theta.width
    h = np.zeros(d)
    out = np.empty((len(observations), d))
    for t, (o, r, a) in enumerate(zip(observations, rewards_in, prev_actions)):
        h = encode_step(theta, int(o), float(r), int(a), h)
        out[t] = h
    return out


def forward_hidden_batch(theta: EncoderParams, observations, rewards_in,
                         prev_actions, mask) -> np.ndarray:
    """Batched hidden states: inputs (B, T+1), mask (B, T+1); returns (B, T+1, d)."""
    B, T1 = observations.shape
    d = theta.width
    h = np.zeros((B, d))
    out = np.zeros((B, T1, d))
    for t in range(T1):
        h = encode_batch(theta, observations[:, t], rewards_in[:, t],
                         prev_actions[:, t], h)
        h = h * mask[:, t][:, None]
        out[:, t] = h
    return out


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(theta: EncoderParams, heads: HeadParams, inputs: dict,
             hiddens: np.ndarray, dl_dlogits: np.ndarray,
             dl_dvalue: np.ndarray, subset_ids: np.ndarray,
             grads: Optional[dict] = None) -> dict:
    """Exact reverse-mode gradients of a loss given per-step output gradients.

    inputs: dict with (B, T+1) arrays `observations`, `rewards_in`,
    `prev_actions`, `mask`; hiddens from forward_hidden_batch;
    dl_dlogits (B, T+1, A) and dl_dvalue (B, T+1) carry the loss gradients
    w.r.t. each step's policy logits and value estimate of the episode's own
    subset head (given by subset_ids (B,)). Gradient accumulation order is
    fixed, so results are independent of how episodes were collected.
    """
    obs = inputs["observations"]
    rews = inputs["rewards_in"]
    pacts = inputs["prev_actions"]
    mask = inputs["mask"]
    B, T1 = obs.shape
    if grads is None:
        grads = zero_grads_like(params_as_dict(theta, heads))

    pw = heads.policy_w[subset_ids]            # (B, A, d)
    vw = heads.value_w[subset_ids]             # (B, d)
    dl_dlogits = dl_dlogits * mask[:, :, None]
    dl_dvalue = dl_dvalue * mask

    # head gradients, grouped per subset for a fixed reduction order
    for m in range(heads.num_subsets):
        sel = np.nonzero(subset_ids == m)[0]
        if len(sel) == 0:
            continue
        g_log = dl_dlogits[sel]                # (b, T+1, A)
        h_sel = hiddens[sel]                   # (b, T+1, d)
        grads["policy_w"][m] += np.einsum("bta,btd->ad", g_log, h_sel)
        grads["policy_b"][m] += g_log.sum(axis=(0, 1))
        g_val = dl_dvalue[sel]
        grads["value_w"][m] += np.einsum("bt,btd->d", g_val, h_sel)
        grads["value_b"][m] += g_val.sum()

    # gradient reaching each hidden state from its step's head outputs
    dh = (np.einsum("bta,bad->btd", dl_dlogits, pw)
          + dl_dvalue[:, :, None] * vw[:, None, :])

    d_carry = np.zeros((B, theta.width))
    for t in range(T1 - 1, -1, -1):
        total = (dh[:, t] + d_carry) * mask[:, t][:, None]
        dz = total * (1.0 - hiddens[:, t] ** 2)     # (B, d)
        np.add.at(grads["w_obs"].T, obs[:, t], dz)
        grads["w_reward"] += (rews[:, t] * theta.reward_scale) @ dz
        np.add.at(grads["w_action"].T, pacts[:, t], dz)
        if t > 0:
            grads["w_hidden"] += dz.T @ hiddens[:, t - 1]
        grads["bias"] += dz.sum(axis=0)
        d_carry = dz @ theta.w_hidden
    return grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: dict) -> "AdamState":
        return AdamState(m=zero_grads_like(params), v=zero_grads_like(params))


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Standard bias-corrected Adam step, in place over the parameter dict."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {k}")
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for k in PARAM_KEYS:
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / b1c
        v_hat = state.v[k] / b2c
        params[k] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_to_json(theta: EncoderParams, heads: HeadParams,
                       adam: Optional[AdamState], meta: dict) -> str:
    params = params_as_dict(theta, heads)
    doc = {
        "meta": meta,
        "reward_scale": theta.reward_scale,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "params": {k: v.ravel().tolist() for k, v in params.items()},
    }
    if adam is not None:
        doc["adam"] = {
            "step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps,
            "m": {k: v.ravel().tolist() for k, v in adam.m.items()},
            "v": {k: v.ravel().tolist() for k, v in adam.v.items()},
        }
    return json.dumps(doc, sort_keys=True)


def checkpoint_from_json(text: str):
    doc = json.loads(text)
    shapes = {k: tuple(v) for k, v in doc["shapes"].items()}

    def load(tree):
        return {k: np.array(tree[k], dtype=np.float64).reshape(shapes[k])
                for k in PARAM_KEYS}

    p = load(doc["params"])
    theta = EncoderParams(w_obs=p["w_obs"], w_reward=p["w_reward"],
                          w_action=p["w_action"], w_hidden=p["w_hidden"],
                          bias=p["bias"], reward_scale=doc["reward_scale"])
    heads = HeadParams(policy_w=p["policy_w"], policy_b=p["policy_b"],
                       value_w=p["value_w"], value_b=p["value_b"])
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState(m=load(a["m"]), v=load(a["v"]), step=a["step"],
                         beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    return theta, heads, adam, doc["meta"]
