"""Clipped-surrogate policy optimization: rollout storage, advantage
estimation, loss terms, and the minibatched update loop.

Losses are computed from arrays; `update` wires them to the networks'
manual backward passes.  The per-sample objective is
min(r * A, clip(r, 1-eps, 1+eps) * A) with r the new/old probability
ratio, combined with a halved-MSE value loss and an entropy bonus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mathcore import AdamConfig, adam_step, as_tensor, require_finite

LOG_RATIO_CLAMP = 20.0


@dataclass
class PPOConfig:
    epsilon: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    gamma: float = 0.99
    gae_lambda: float = 0.95
    rollout_steps: int = 2048
    epochs: int = 4
    minibatch_size: int = 256
    normalize_advantages: bool = True
    num_envs: int = 8

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.rollout_steps % self.minibatch_size != 0:
            raise ValueError("rollout_steps must be divisible by minibatch_size")
        if self.num_envs <= 0 or self.epochs < 0:
            raise ValueError("num_envs must be positive and epochs >= 0")


def compute_gae(rewards, values, dones, bootstrap_value, gamma, lam):
    """Generalized advantage estimates and return targets.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t)
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}

    Accepts (T,) or (T, N) arrays; `bootstrap_value` is V(s_T) for
    non-terminal rollout ends (0 where terminal).
    """
    rewards, values = as_tensor(rewards), as_tensor(values)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values, dones must share one shape")
    require_finite("gae rewards", rewards)
    require_finite("gae values", values)
    bootstrap = np.broadcast_to(as_tensor(bootstrap_value), rewards.shape[1:])
    require_finite("gae bootstrap", bootstrap)

    advantages = np.zeros_like(rewards)
    next_value = bootstrap
    next_adv = np.zeros_like(bootstrap)
    for t in range(rewards.shape[0] - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        next_adv = delta + gamma * lam * not_done * next_adv
        advantages[t] = next_adv
        next_value = values[t]
    return advantages, advantages + values


def prob_ratio(log_prob_new, log_prob_old):
    """exp(new - old) with the log-ratio clamped to +-LOG_RATIO_CLAMP;
    returns (ratio, clamped_mask)."""
    log_ratio = as_tensor(log_prob_new) - as_tensor(log_prob_old)
    clamped = np.abs(log_ratio) > LOG_RATIO_CLAMP
    return np.exp(np.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)), clamped


def clipped_surrogate(log_prob_new, log_prob_old, advantage, epsilon):
    """Per-sample clipped objective min(r*A, clip(r)*A)."""
    ratio, _ = prob_ratio(log_prob_new, log_prob_old)
    advantage = as_tensor(advantage)
    return np.minimum(ratio * advantage,
                      np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage)


def value_loss(values_new, returns):
    """0.5 * mean squared error between value predictions and return targets."""
    values_new, returns = as_tensor(values_new), as_tensor(returns)
    if values_new.shape != returns.shape:
        raise ValueError("values and returns must share one shape")
    return float(0.5 * np.mean((values_new - returns) ** 2))


def entropy(log_probs):
    """Mean policy entropy -sum(p log p) over a batch of log-prob rows.

    Zero-probability entries (log prob -inf) contribute 0 by convention.
    """
    lp = as_tensor(log_probs)
    if lp.ndim == 1:
        lp = lp[None]
    p = np.exp(lp)
    terms = np.zeros_like(p)
    mask = p > 0.0
    terms[mask] = p[mask] * lp[mask]
    return float(np.mean(-terms.sum(axis=-1)))


def normalize_advantages(adv):
    adv = as_tensor(adv)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def total_loss_from_parts(chosen_log_prob_new, log_prob_old, full_log_probs,
                          values_new, returns, advantages, cfg: PPOConfig):
    """Scalar training loss and metric terms from precomputed arrays.

    The objective mean(surrogate) - c1 * value_loss + c2 * entropy is
    maximized; the returned loss is its negation.
    """
    ratio, clamped = prob_ratio(chosen_log_prob_new, log_prob_old)
    surr = clipped_surrogate(chosen_log_prob_new, log_prob_old, advantages,
                             cfg.epsilon)
    surr_mean = float(surr.mean())
    vf = value_loss(values_new, returns)
    ent = entropy(full_log_probs)
    loss = -(surr_mean - cfg.c1 * vf + cfg.c2 * ent)
    metrics = {
        "loss": loss,
        "loss_clip": -surr_mean,
        "loss_value": vf,
        "entropy": ent,
        "approx_kl": float(np.mean(as_tensor(log_prob_old) -
                                   as_tensor(chosen_log_prob_new))),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.epsilon)),
        "ratio_clamped_fraction": float(clamped.mean()),
    }
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite total loss; terms: {metrics}")
    return loss, metrics


def total_loss(batch: dict, nets, cfg: PPOConfig):
    """Forward the networks on a batch dict and evaluate the loss.

    Expects keys obs, tokens, actions, log_prob_old, advantages, returns.
    Advantages are used as given (normalize beforehand if configured).
    """
    _, log_probs, values, _ = nets.policy_forward(batch["obs"], batch["tokens"])
    chosen = log_probs[np.arange(len(batch["actions"])), batch["actions"]]
    return total_loss_from_parts(chosen, batch["log_prob_old"], log_probs,
                                 values, batch["returns"], batch["advantages"],
                                 cfg)


def loss_gradients(log_probs, actions, log_prob_old, advantages, values,
                   returns, cfg: PPOConfig):
    """Analytic d(loss)/d(logits) and d(loss)/d(values) for one minibatch."""
    batch = len(actions)
    probs = np.exp(log_probs)
    chosen = log_probs[np.arange(batch), actions]
    log_ratio = chosen - log_prob_old
    unclamped = np.abs(log_ratio) <= LOG_RATIO_CLAMP
    ratio = np.exp(np.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    surr_unclipped = ratio * advantages
    surr_clipped = np.clip(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon) * advantages
    take_unclipped = surr_unclipped <= surr_clipped

    # surrogate term: dL/d(chosen log prob)
    g_chosen = -(1.0 / batch) * advantages * ratio * take_unclipped * unclamped
    grad_logits = -probs * g_chosen[:, None]
    grad_logits[np.arange(batch), actions] += g_chosen

    # entropy term: dL/dz_j = (c2 / batch) * p_j * (log p_j + H)
    ent_per = -(probs * log_probs).sum(axis=1)
    grad_logits += (cfg.c2 / batch) * probs * (log_probs + ent_per[:, None])

    grad_values = (cfg.c1 / batch) * (values - returns)
    return grad_logits, grad_values


class RolloutBuffer:
    """Fixed-horizon on-policy storage for rollout_steps x num_envs samples."""

    def __init__(self, steps: int, num_envs: int, obs_shape, token_dim: int):
        self.steps = steps
        self.num_envs = num_envs
        self.obs = np.zeros((steps, num_envs) + tuple(obs_shape), dtype=np.float64)
        self.tokens = np.zeros((steps, num_envs, token_dim), dtype=np.float64)
        self.actions = np.zeros((steps, num_envs), dtype=np.int64)
        self.log_probs = np.zeros((steps, num_envs), dtype=np.float64)
        self.values = np.zeros((steps, num_envs), dtype=np.float64)
        self.rewards = np.zeros((steps, num_envs), dtype=np.float64)
        self.dones = np.zeros((steps, num_envs), dtype=bool)
        self.advantages = None
        self.returns = None

    @property
    def size(self) -> int:
        return self.steps * self.num_envs

    def put(self, t, obs, tokens, actions, log_probs, values, rewards, dones):
        self.obs[t] = obs
        self.tokens[t] = tokens
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.dones[t] = dones

    def finalize(self, bootstrap_values, gamma, lam):
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, bootstrap_values, gamma, lam)
        require_finite("advantages", self.advantages)

    def flattened(self) -> dict:
        """Merge lanes in env-index order: sample i*steps + t is (env i, step t)."""
        if self.advantages is None:
            raise RuntimeError("finalize() must run before flattened()")

        def merge(arr):
            return np.ascontiguousarray(np.swapaxes(arr, 0, 1)).reshape(
                (self.size,) + arr.shape[2:])

        return {
            "obs": merge(self.obs),
            "tokens": merge(self.tokens),
            "actions": merge(self.actions),
            "log_prob_old": merge(self.log_probs),
            "values_old": merge(self.values),
            "advantages": merge(self.advantages),
            "returns": merge(self.returns),
        }


def update(buffer: RolloutBuffer, nets, adam_cfg: AdamConfig, cfg: PPOConfig,
           rng: np.random.Generator) -> dict:
    """Minibatched clipped-surrogate update over the full buffer.

    For each epoch the sample order is reshuffled with the run RNG; every
    minibatch does one forward/backward/Adam step over actor, critic, and
    encoder.  Deterministic given (buffer, parameters, rng state).
    """
    data = buffer.flattened()
    total = buffer.size
    metric_sums: dict = {}
    n_batches = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(total)
        for start in range(0, total, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            obs = data["obs"][idx]
            tokens = data["tokens"][idx]
            actions = data["actions"][idx]
            old_lp = data["log_prob_old"][idx]
            adv = data["advantages"][idx]
            if cfg.normalize_advantages:
                adv = normalize_advantages(adv)
            returns = data["returns"][idx]

            _, log_probs, values, cache = nets.policy_forward(obs, tokens)
            chosen = log_probs[np.arange(len(idx)), actions]
            _, metrics = total_loss_from_parts(chosen, old_lp, log_probs,
                                               values, returns, adv, cfg)
            grad_logits, grad_values = loss_gradients(
                log_probs, actions, old_lp, adv, values, returns, cfg)
            nets.policy_backward(grad_logits, grad_values, cache)
            adam_step(nets.params, adam_cfg)

            n_batches += 1
            for key, val in metrics.items():
                metric_sums[key] = metric_sums.get(key, 0.0) + val
    if n_batches == 0:
        return {}
    return {key: val / n_batches for key, val in metric_sums.items()}
