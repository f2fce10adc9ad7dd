"""Run orchestration: config-driven training, evaluation, heatmap export,
and the whole-loss gradient check.

Every output file (metrics CSV, eval report CSV, heatmap CSV/PGM,
checkpoint JSON) embeds the exact run configuration; files derived from a
checkpoint also embed that checkpoint's content hash.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import envs as envs_mod
from .envs import HORIZON, N_ACTIONS, OBS_SHAPE, GRID, make_env
from .mathcore import AdamConfig, GradCheckReport, finite_diff_check
from .nets import (NetConfig, PolicyNetworks, file_sha256, load_checkpoint,
                   restore_networks, save_checkpoint)
from .ppo import PPOConfig, RolloutBuffer, loss_gradients, total_loss, update
from .rng import SeededStreams
from .tokens import TOKEN_DIM, make_provider, provide

CHECKPOINT_EVERY_UPDATES = 10
METRICS_COLUMNS = ("step", "mean_return", "success_rate_window", "loss_clip",
                   "loss_value", "entropy", "approx_kl", "clip_fraction")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    env: str = "deflect"
    tokens: str = "oracle"
    token_sigma: float = 0.1
    token_p_corrupt: float = 0.25
    ppo: PPOConfig = field(default_factory=PPOConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    net: NetConfig = field(default_factory=NetConfig)
    total_timesteps: int = 300_000
    seed: int = 0
    shaping: bool = True
    out_dir: str = "runs/out"

    def __post_init__(self):
        envs_mod.EnvKind(self.env)
        if self.tokens not in ("oracle", "noisy", "null"):
            raise ValueError(f"unknown token provider {self.tokens!r}")
        if self.total_timesteps < 0:
            raise ValueError("total_timesteps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        for key, sub in (("ppo", PPOConfig), ("adam", AdamConfig),
                         ("net", NetConfig)):
            if key in data and isinstance(data[key], dict):
                data[key] = sub(**data[key])
        return cls(**data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def sample_actions(rng: np.random.Generator, log_probs: np.ndarray) -> np.ndarray:
    """Categorical draw per row from log-probability rows."""
    probs = np.exp(log_probs)
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    u = rng.random(log_probs.shape[0])
    return (u[:, None] < cdf).argmax(axis=-1)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build_networks(cfg: RunConfig, streams: SeededStreams) -> PolicyNetworks:
    return PolicyNetworks.create(cfg.net, streams.stream("init"))


def _check_dimensions(cfg: RunConfig):
    expected = (cfg.net.obs_channels, cfg.net.obs_size, cfg.net.obs_size)
    if expected != OBS_SHAPE:
        raise ValueError(f"network observation shape {expected} does not match "
                         f"environment shape {OBS_SHAPE}")
    if cfg.net.action_count != N_ACTIONS:
        raise ValueError(f"network action count {cfg.net.action_count} != "
                         f"{N_ACTIONS}")
    if cfg.net.token_dim != TOKEN_DIM:
        raise ValueError(f"network token_dim {cfg.net.token_dim} != provider "
                         f"token dimension {TOKEN_DIM}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    config: RunConfig
    checkpoint_path: str
    metrics_path: str
    updates: int
    total_steps: int
    episodes_started: int
    episodes_completed: int
    provider_calls: int


class _Lane:
    """One environment slot of the vectorized rollout."""

    def __init__(self, index, env, provider, streams):
        self.index = index
        self.env = env
        self.provider = provider
        self.streams = streams
        self.episode = -1
        self.obs = None
        self.tokens = None
        self.episode_return = 0.0

    def begin_episode(self):
        self.episode += 1
        seed = self.streams.derive("episode", self.index, self.episode)
        self.obs, instruction = self.env.reset(seed)
        self.provider.begin_episode()
        self.tokens = provide(self.provider, self.obs, instruction,
                              self.streams.stream("tokens", self.index,
                                                  self.episode))
        self.episode_return = 0.0


def train(cfg: RunConfig, log=None) -> TrainResult:
    """Alternate rollout collection and updates until total_timesteps.

    Tokens are fetched exactly once per episode, at reset; the provider
    call counter is audited against the episode count after every rollout.
    """
    _check_dimensions(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    streams = SeededStreams(cfg.seed)
    nets = _build_networks(cfg, streams)
    provider = make_provider(cfg.tokens, cfg.token_sigma, cfg.token_p_corrupt)
    lanes = [_Lane(i, make_env(cfg.env, shaping=cfg.shaping), provider, streams)
             for i in range(cfg.ppo.num_envs)]
    for lane in lanes:
        lane.begin_episode()
    sampling_rng = streams.stream("sampling")
    shuffle_rng = streams.stream("shuffle")
    buffer = RolloutBuffer(cfg.ppo.rollout_steps, cfg.ppo.num_envs, OBS_SHAPE,
                           cfg.net.token_dim)

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    final_path = os.path.join(cfg.out_dir, "checkpoint_final.json")
    config_dict = cfg.to_dict()

    total_steps = 0
    updates = 0
    episodes_completed = 0
    with open(metrics_path, "w") as metrics_fh:
        metrics_fh.write(f"# run_config {cfg.canonical_json()}\n")
        metrics_fh.write(",".join(METRICS_COLUMNS) + "\n")
        while total_steps < cfg.total_timesteps:
            window_returns = []
            window_successes = []
            for t in range(cfg.ppo.rollout_steps):
                obs = np.asarray([lane.obs for lane in lanes])
                toks = np.asarray([lane.tokens for lane in lanes])
                log_probs, values = nets.act(obs, toks)
                actions = sample_actions(sampling_rng, log_probs)
                chosen = log_probs[np.arange(len(lanes)), actions]
                rewards = np.zeros(len(lanes))
                dones = np.zeros(len(lanes), dtype=bool)
                for lane, action in zip(lanes, actions):
                    result = lane.env.step(int(action))
                    rewards[lane.index] = result.reward
                    dones[lane.index] = result.done
                    lane.episode_return += result.reward
                    if result.done:
                        window_returns.append(lane.episode_return)
                        window_successes.append(result.success)
                        episodes_completed += 1
                        lane.begin_episode()
                    else:
                        lane.obs = result.observation
                buffer.put(t, obs, toks, actions, chosen, values, rewards, dones)
            total_steps += buffer.size

            obs = np.asarray([lane.obs for lane in lanes])
            toks = np.asarray([lane.tokens for lane in lanes])
            _, bootstrap = nets.act(obs, toks)
            buffer.finalize(bootstrap, cfg.ppo.gamma, cfg.ppo.gae_lambda)
            stats = update(buffer, nets, cfg.adam, cfg.ppo, shuffle_rng)
            updates += 1

            if provider.total_calls != provider.episodes_started:
                raise RuntimeError(
                    f"token contract violated: {provider.total_calls} provider "
                    f"calls over {provider.episodes_started} episodes")

            row = {
                "step": total_steps,
                "mean_return": float(np.mean(window_returns)),
                "success_rate_window": float(np.mean(window_successes)),
                "loss_clip": stats.get("loss_clip", 0.0),
                "loss_value": stats.get("loss_value", 0.0),
                "entropy": stats.get("entropy", 0.0),
                "approx_kl": stats.get("approx_kl", 0.0),
                "clip_fraction": stats.get("clip_fraction", 0.0),
            }
            metrics_fh.write(",".join(_fmt(row[col]) for col in METRICS_COLUMNS)
                             + "\n")
            if log is not None:
                log(f"update {updates}: step={total_steps} "
                    f"return={row['mean_return']:.3f} "
                    f"success={row['success_rate_window']:.2f} "
                    f"entropy={row['entropy']:.3f}")
            if updates % CHECKPOINT_EVERY_UPDATES == 0:
                save_checkpoint(os.path.join(cfg.out_dir,
                                             f"checkpoint_upd{updates:04d}.json"),
                                nets, config_dict)
    save_checkpoint(final_path, nets, config_dict)
    return TrainResult(config=cfg, checkpoint_path=final_path,
                       metrics_path=metrics_path, updates=updates,
                       total_steps=total_steps,
                       episodes_started=provider.episodes_started,
                       episodes_completed=episodes_completed,
                       provider_calls=provider.total_calls)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    env: str
    provider: str
    seed: int
    episodes: int
    successes: int
    success_rate: float
    mean_return: float
    mean_episode_length: float


def _load_for_inference(checkpoint_path, env_name=None, tokens_name=None):
    ckpt = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(ckpt.config)
    if env_name is not None:
        cfg = replace(cfg, env=env_name)
    if tokens_name is not None:
        cfg = replace(cfg, tokens=tokens_name)
    _check_dimensions(cfg)
    nets = restore_networks(ckpt, cfg.net)
    return cfg, nets


def _rollout_episodes(cfg, nets, episodes, eval_seed, on_step=None,
                      on_reset=None):
    env = make_env(cfg.env, shaping=cfg.shaping)
    provider = make_provider(cfg.tokens, cfg.token_sigma, cfg.token_p_corrupt)
    streams = SeededStreams(eval_seed)
    action_rng = streams.stream("eval-sampling")
    successes = 0
    returns = np.zeros(episodes)
    lengths = np.zeros(episodes)
    for ep in range(episodes):
        seed = streams.derive("eval-episode", ep)
        obs, instruction = env.reset(seed)
        provider.begin_episode()
        toks = provide(provider, obs, instruction,
                       streams.stream("eval-tokens", ep))
        if on_reset is not None:
            on_reset(env)
        ep_return = 0.0
        for step in range(HORIZON):
            log_probs, _ = nets.act(obs[None], toks[None])
            action = int(sample_actions(action_rng, log_probs)[0])
            result = env.step(action)
            ep_return += result.reward
            obs = result.observation
            if on_step is not None:
                on_step(result)
            if result.done:
                successes += int(result.success)
                lengths[ep] = step + 1
                break
        returns[ep] = ep_return
    if provider.total_calls != provider.episodes_started:
        raise RuntimeError("token contract violated during evaluation")
    return successes, returns, lengths


def evaluate(checkpoint_path, episodes: int = 100, eval_seed: int = 0,
             env_name=None, tokens_name=None, report_path=None) -> EvalReport:
    """Run eval episodes with stochastic action sampling; no learning."""
    cfg, nets = _load_for_inference(checkpoint_path, env_name, tokens_name)
    successes, returns, lengths = _rollout_episodes(cfg, nets, episodes,
                                                    eval_seed)
    report = EvalReport(env=cfg.env, provider=cfg.tokens, seed=eval_seed,
                        episodes=episodes, successes=successes,
                        success_rate=successes / episodes,
                        mean_return=float(returns.mean()),
                        mean_episode_length=float(lengths.mean()))
    if report_path is not None:
        _write_eval_csv(report_path, report, cfg, checkpoint_path)
    return report


def _write_eval_csv(path, report: EvalReport, cfg: RunConfig, checkpoint_path):
    fields = ("env", "provider", "seed", "episodes", "successes",
              "success_rate", "mean_return", "mean_episode_length")
    with open(path, "w") as fh:
        fh.write(f"# run_config {cfg.canonical_json()}\n")
        fh.write(f"# checkpoint_sha256 {file_sha256(checkpoint_path)}\n")
        fh.write("# actions sampled stochastically from the policy\n")
        fh.write(",".join(fields) + "\n")
        fh.write(",".join(_fmt(getattr(report, f)) for f in fields) + "\n")


# ---------------------------------------------------------------------------
# reward-weighted visitation heatmaps
# ---------------------------------------------------------------------------

@dataclass
class Heatmap:
    grid: np.ndarray
    episodes: int
    normalization: float
    goal_cells: set

    def argmax_cell(self):
        idx = int(np.argmax(self.grid))
        return (idx // GRID, idx % GRID)


class HeatmapAccumulator:
    """Visit counts and reward sums per tool cell; H = freq x mean reward."""

    def __init__(self, grid: int = GRID):
        self.visits = np.zeros((grid, grid))
        self.reward_sum = np.zeros((grid, grid))

    def add(self, cell, reward: float):
        self.visits[cell] += 1.0
        self.reward_sum[cell] += reward

    def finalize(self):
        """Normalized grid and the max-|H| divisor (0 when all-zero)."""
        total = self.visits.sum()
        grid = np.zeros_like(self.visits)
        if total > 0:
            seen = self.visits > 0
            grid[seen] = (self.visits[seen] / total) * \
                (self.reward_sum[seen] / self.visits[seen])
        norm = float(np.max(np.abs(grid)))
        if norm > 0:
            grid = grid / norm
        return grid, norm


def heatmap(checkpoint_path, episodes: int = 100, eval_seed: int = 0,
            out_prefix=None, env_name=None, tokens_name=None) -> Heatmap:
    """Accumulate received reward at the tool's post-action cell over eval
    episodes; H[c] = (visits[c]/total) * mean_reward[c], scaled to max |H| = 1."""
    cfg, nets = _load_for_inference(checkpoint_path, env_name, tokens_name)
    acc = HeatmapAccumulator()
    goal_cells = set()
    _rollout_episodes(
        cfg, nets, episodes, eval_seed,
        on_step=lambda res: acc.add(res.info["tool_cell"], res.reward),
        on_reset=lambda env: goal_cells.update(env.goal_cells()))
    grid, norm = acc.finalize()
    result = Heatmap(grid=grid, episodes=episodes, normalization=norm,
                     goal_cells=goal_cells)
    if out_prefix is not None:
        _write_heatmap_csv(f"{out_prefix}.csv", result, cfg, checkpoint_path)
        write_pgm(f"{out_prefix}.pgm", result.grid, cfg, checkpoint_path)
    return result


def _write_heatmap_csv(path, hm: Heatmap, cfg: RunConfig, checkpoint_path):
    with open(path, "w") as fh:
        fh.write(f"# run_config {cfg.canonical_json()}\n")
        fh.write(f"# checkpoint_sha256 {file_sha256(checkpoint_path)}\n")
        fh.write(f"# episodes {hm.episodes} normalization {_fmt(hm.normalization)}\n")
        fh.write("row,col,value\n")
        for r in range(hm.grid.shape[0]):
            for c in range(hm.grid.shape[1]):
                fh.write(f"{r},{c},{_fmt(float(hm.grid[r, c]))}\n")


def write_pgm(path, grid: np.ndarray, cfg: RunConfig = None,
              checkpoint_path=None):
    """8-bit binary PGM; values map linearly from [-1, 1] to [0, 255]."""
    levels = np.clip(np.rint((grid + 1.0) * 127.5), 0, 255).astype(np.uint8)
    header = ["P5"]
    if cfg is not None:
        header.append(f"# run_config {cfg.canonical_json()}")
    if checkpoint_path is not None:
        header.append(f"# checkpoint_sha256 {file_sha256(checkpoint_path)}")
    header.append(f"{grid.shape[1]} {grid.shape[0]}")
    header.append("255")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(levels.tobytes())


# ---------------------------------------------------------------------------
# gradient check over the full policy loss
# ---------------------------------------------------------------------------

def gradcheck(seed: int = 0, batch: int = 4, samples: int = 120,
              h: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of the analytic gradients of the full
    encoder+actor+critic loss on a synthetic batch."""
    streams = SeededStreams(seed)
    net_cfg = NetConfig()
    nets = PolicyNetworks.create(net_cfg, streams.stream("gradcheck-init"))
    data_rng = streams.stream("gradcheck-data")
    ppo_cfg = PPOConfig()

    obs = data_rng.random((batch, net_cfg.obs_channels, net_cfg.obs_size,
                           net_cfg.obs_size))
    synthetic = {
        "obs": obs,
        "tokens": data_rng.random((batch, net_cfg.token_dim)),
        "actions": data_rng.integers(net_cfg.action_count, size=batch),
        "log_prob_old": -0.5 - data_rng.random(batch),
        "advantages": data_rng.normal(1.0, 0.5, size=batch),
        "returns": data_rng.normal(0.0, 1.0, size=batch),
    }

    def loss_fn():
        return total_loss(synthetic, nets, ppo_cfg)[0]

    nets.params.zero_grads()
    _, log_probs, values, cache = nets.policy_forward(synthetic["obs"],
                                                      synthetic["tokens"])
    grad_logits, grad_values = loss_gradients(
        log_probs, synthetic["actions"], synthetic["log_prob_old"],
        synthetic["advantages"], values, synthetic["returns"], ppo_cfg)
    nets.policy_backward(grad_logits, grad_values, cache)

    report = finite_diff_check(loss_fn, nets.params, h=h, tolerance=tolerance,
                               samples=samples,
                               rng=streams.stream("gradcheck-sample"))
    nets.params.zero_grads()
    return report
