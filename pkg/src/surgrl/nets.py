"""Visual encoder, actor, and critic over a shared parameter store.

The architecture is fixed: two 3x3 stride-2 conv layers with ReLU, a dense
projection to the embedding with tanh, and one hidden dense layer (tanh)
per head.  Forward passes return caches that the matching backward passes
consume; all gradients accumulate into the shared `ParamStore`.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass

import numpy as np

from .mathcore import (
    ParamStore, ShapeError, as_tensor, conv2d_forward, conv2d_backward,
    conv2d_out_size, dense_forward, dense_backward, require_finite,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class NetConfig:
    token_dim: int = 16
    embed_dim: int = 64
    hidden_dim: int = 64
    action_count: int = 5
    obs_channels: int = 3
    obs_size: int = 24
    conv1_filters: int = 8
    conv2_filters: int = 16

    def __post_init__(self):
        for name in ("token_dim", "embed_dim", "hidden_dim", "action_count",
                     "obs_channels", "obs_size", "conv1_filters", "conv2_filters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def state_dim(self) -> int:
        return self.token_dim + self.embed_dim


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax, stable via logsumexp."""
    z = as_tensor(logits)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return z - lse


def concat_state(tokens: np.ndarray, embedding: np.ndarray,
                 token_dim: int = 16, embed_dim: int = 64) -> np.ndarray:
    """Policy state [tokens; embedding], tokens first, no mixing."""
    tokens, embedding = as_tensor(tokens), as_tensor(embedding)
    if tokens.shape[-1] != token_dim:
        raise ShapeError(f"concat_state: token length {tokens.shape[-1]} != {token_dim}")
    if embedding.shape[-1] != embed_dim:
        raise ShapeError(
            f"concat_state: embedding length {embedding.shape[-1]} != {embed_dim}")
    return np.concatenate([tokens, embedding], axis=-1)


def _uniform_init(rng, shape, fan_in, fan_out, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class PolicyNetworks:
    """Encoder + actor + critic with manual forward/backward passes."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self.params = ParamStore()
        c, f1, f2 = cfg.obs_channels, cfg.conv1_filters, cfg.conv2_filters
        side1 = conv2d_out_size(cfg.obs_size, 2)
        side2 = conv2d_out_size(side1, 2)
        self.flat_dim = f2 * side2 * side2
        p = self.params
        p.add("encoder.conv1.w", np.zeros((f1, c, 3, 3)))
        p.add("encoder.conv1.b", np.zeros(f1))
        p.add("encoder.conv2.w", np.zeros((f2, f1, 3, 3)))
        p.add("encoder.conv2.b", np.zeros(f2))
        p.add("encoder.fc.w", np.zeros((self.flat_dim, cfg.embed_dim)))
        p.add("encoder.fc.b", np.zeros(cfg.embed_dim))
        p.add("actor.fc1.w", np.zeros((cfg.state_dim, cfg.hidden_dim)))
        p.add("actor.fc1.b", np.zeros(cfg.hidden_dim))
        p.add("actor.out.w", np.zeros((cfg.hidden_dim, cfg.action_count)))
        p.add("actor.out.b", np.zeros(cfg.action_count))
        p.add("critic.fc1.w", np.zeros((cfg.state_dim, cfg.hidden_dim)))
        p.add("critic.fc1.b", np.zeros(cfg.hidden_dim))
        p.add("critic.out.w", np.zeros((cfg.hidden_dim, 1)))
        p.add("critic.out.b", np.zeros(1))

    @classmethod
    def create(cls, cfg: NetConfig, rng: np.random.Generator) -> "PolicyNetworks":
        nets = cls(cfg)
        nets.init_params(rng)
        return nets

    def init_params(self, rng: np.random.Generator):
        """Scaled-uniform init; actor output uses gain 0.01 so the initial
        policy stays near-uniform."""
        p = self.params
        for name in p.names():
            if name.endswith(".b"):
                p[name].value.fill(0.0)
                continue
            w = p[name].value
            if name.startswith("encoder.conv"):
                fan_in = w.shape[1] * 9
                fan_out = w.shape[0] * 9
            else:
                fan_in, fan_out = w.shape
            gain = 0.01 if name == "actor.out.w" else 1.0
            w[...] = _uniform_init(rng, w.shape, fan_in, fan_out, gain)

    # -- encoder ------------------------------------------------------------

    def _encoder_forward(self, obs: np.ndarray):
        p = self.params
        cfg = self.cfg
        if obs.shape[1:] != (cfg.obs_channels, cfg.obs_size, cfg.obs_size):
            raise ShapeError(f"encoder: observation shape {obs.shape[1:]} != "
                             f"{(cfg.obs_channels, cfg.obs_size, cfg.obs_size)}")
        z1 = conv2d_forward(obs, p.value("encoder.conv1.w"), p.value("encoder.conv1.b"))
        a1 = np.maximum(z1, 0.0)
        z2 = conv2d_forward(a1, p.value("encoder.conv2.w"), p.value("encoder.conv2.b"))
        a2 = np.maximum(z2, 0.0)
        flat = a2.reshape(obs.shape[0], self.flat_dim)
        z3 = dense_forward(flat, p.value("encoder.fc.w"), p.value("encoder.fc.b"))
        emb = np.tanh(z3)
        cache = {"obs": obs, "z1": z1, "a1": a1, "z2": z2, "a2": a2,
                 "flat": flat, "emb": emb}
        return emb, cache

    def _encoder_backward(self, grad_emb: np.ndarray, cache: dict):
        p = self.params
        grad_z3 = grad_emb * (1.0 - cache["emb"] ** 2)
        grad_flat, gw, gb = dense_backward(grad_z3, cache["flat"],
                                           p.value("encoder.fc.w"))
        p.add_grad("encoder.fc.w", gw)
        p.add_grad("encoder.fc.b", gb)
        grad_a2 = grad_flat.reshape(cache["a2"].shape)
        grad_z2 = grad_a2 * (cache["z2"] > 0.0)
        grad_a1, gk2, gb2 = conv2d_backward(grad_z2, cache["a1"],
                                            p.value("encoder.conv2.w"))
        p.add_grad("encoder.conv2.w", gk2)
        p.add_grad("encoder.conv2.b", gb2)
        grad_z1 = grad_a1 * (cache["z1"] > 0.0)
        _, gk1, gb1 = conv2d_backward(grad_z1, cache["obs"],
                                      p.value("encoder.conv1.w"),
                                      need_grad_input=False)
        p.add_grad("encoder.conv1.w", gk1)
        p.add_grad("encoder.conv1.b", gb1)

    def encode(self, observation: np.ndarray) -> np.ndarray:
        """Visual embedding for one observation (C, H, W); entries in (-1, 1)."""
        obs = as_tensor(observation)
        single = obs.ndim == 3
        if single:
            obs = obs[None]
        emb, _ = self._encoder_forward(obs)
        return emb[0] if single else emb

    # -- heads ----------------------------------------------------------------

    def _head_forward(self, prefix: str, state: np.ndarray):
        p = self.params
        if state.shape[-1] != self.cfg.state_dim:
            raise ShapeError(f"{prefix}: state length {state.shape[-1]} != "
                             f"{self.cfg.state_dim}")
        z1 = dense_forward(state, p.value(f"{prefix}.fc1.w"), p.value(f"{prefix}.fc1.b"))
        h = np.tanh(z1)
        out = dense_forward(h, p.value(f"{prefix}.out.w"), p.value(f"{prefix}.out.b"))
        return out, {"state": state, "h": h}

    def _head_backward(self, prefix: str, grad_out: np.ndarray, cache: dict):
        p = self.params
        grad_h, gw, gb = dense_backward(grad_out, cache["h"], p.value(f"{prefix}.out.w"))
        p.add_grad(f"{prefix}.out.w", gw)
        p.add_grad(f"{prefix}.out.b", gb)
        grad_z1 = grad_h * (1.0 - cache["h"] ** 2)
        grad_state, gw1, gb1 = dense_backward(grad_z1, cache["state"],
                                              p.value(f"{prefix}.fc1.w"))
        p.add_grad(f"{prefix}.fc1.w", gw1)
        p.add_grad(f"{prefix}.fc1.b", gb1)
        return grad_state

    def actor_forward(self, state: np.ndarray):
        """(logits, log_probs) for a state vector or batch of states."""
        state = as_tensor(state)
        single = state.ndim == 1
        if single:
            state = state[None]
        logits, _ = self._head_forward("actor", state)
        require_finite("actor logits", logits)
        log_probs = log_softmax(logits)
        if single:
            return logits[0], log_probs[0]
        return logits, log_probs

    def critic_forward(self, state: np.ndarray):
        """Scalar value estimate (float for a single state, array for a batch)."""
        state = as_tensor(state)
        single = state.ndim == 1
        if single:
            state = state[None]
        out, _ = self._head_forward("critic", state)
        require_finite("critic value", out)
        values = out[:, 0]
        return float(values[0]) if single else values

    # -- joint policy pass ------------------------------------------------------

    def policy_forward(self, obs: np.ndarray, tokens: np.ndarray):
        """Full pass: (logits, log_probs, values, cache) for a batch."""
        obs, tokens = as_tensor(obs), as_tensor(tokens)
        emb, enc_cache = self._encoder_forward(obs)
        state = concat_state(tokens, emb, self.cfg.token_dim, self.cfg.embed_dim)
        logits, actor_cache = self._head_forward("actor", state)
        require_finite("actor logits", logits)
        values, critic_cache = self._head_forward("critic", state)
        log_probs = log_softmax(logits)
        cache = {"encoder": enc_cache, "actor": actor_cache, "critic": critic_cache}
        return logits, log_probs, values[:, 0], cache

    def policy_backward(self, grad_logits: np.ndarray, grad_values: np.ndarray,
                        cache: dict):
        """Accumulate gradients from both heads; encoder sees their sum."""
        grad_state_a = self._head_backward("actor", grad_logits, cache["actor"])
        grad_state_c = self._head_backward("critic", grad_values[:, None],
                                           cache["critic"])
        grad_state = grad_state_a + grad_state_c
        grad_emb = grad_state[:, self.cfg.token_dim:]
        self._encoder_backward(grad_emb, cache["encoder"])

    def act(self, obs: np.ndarray, tokens: np.ndarray):
        """Collection-time pass without gradient caches: (log_probs, values)."""
        _, log_probs, values, _ = self.policy_forward(obs, tokens)
        return log_probs, values


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    format_version: int
    config: dict
    parameters: list


def checkpoint_payload(nets: PolicyNetworks, config: dict) -> dict:
    records = []
    for name, entry in nets.params.items():
        require_finite(f"parameter {name!r}", entry.value)
        records.append({
            "name": name,
            "shape": list(entry.value.shape),
            "data": [float(x) for x in entry.value.reshape(-1)],
        })
    return {"format_version": CHECKPOINT_FORMAT_VERSION,
            "config": config,
            "parameters": records}


def save_checkpoint(path, nets: PolicyNetworks, config: dict):
    """Write a versioned JSON checkpoint; decimal floats round-trip exactly."""
    payload = checkpoint_payload(nets, config)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint file."""
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unknown checkpoint format_version {version!r} "
                         f"(expected {CHECKPOINT_FORMAT_VERSION})")
    if "config" not in payload or "parameters" not in payload:
        raise ValueError(f"checkpoint {path} missing config or parameters")
    for rec in payload["parameters"]:
        name = rec.get("name", "<unnamed>")
        shape = rec.get("shape")
        data = rec.get("data")
        if not isinstance(shape, list) or any(int(s) <= 0 for s in shape):
            raise ValueError(f"checkpoint parameter {name!r}: bad shape {shape}")
        if len(data) != int(np.prod(shape)):
            raise ValueError(f"checkpoint parameter {name!r}: shape {shape} "
                             f"implies {int(np.prod(shape))} values, got {len(data)}")
        if not np.isfinite(np.asarray(data, dtype=np.float64)).all():
            raise ValueError(f"checkpoint parameter {name!r}: non-finite data")
    return Checkpoint(format_version=version, config=payload["config"],
                      parameters=payload["parameters"])


def restore_networks(ckpt: Checkpoint, cfg: NetConfig) -> PolicyNetworks:
    """Build networks from `cfg` and load the checkpoint parameters into them."""
    nets = PolicyNetworks(cfg)
    expected = set(nets.params.names())
    seen = set()
    for rec in ckpt.parameters:
        name = rec["name"]
        if name not in expected:
            raise ValueError(f"checkpoint parameter {name!r} not part of the "
                             "configured architecture")
        target = nets.params.value(name)
        shape = tuple(rec["shape"])
        if shape != target.shape:
            raise ValueError(f"checkpoint parameter {name!r}: shape {shape} "
                             f"does not match configured shape {target.shape}")
        target[...] = np.asarray(rec["data"], dtype=np.float64).reshape(shape)
        seen.add(name)
    missing = expected - seen
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
    return nets


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
