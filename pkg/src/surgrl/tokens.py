"""Planning-token providers: map (initial observation, instruction) to a
fixed 16-float vector exactly once per episode.

The oracle provider encodes the instructed target sequence as two 8-slot
one-hot blocks (block j carries target_sequence[j]; a missing element
leaves its block zero).  Sequences longer than two entries are only used
for 3-permutations, whose first two entries determine the third, so the
encoding stays injective per task.
"""

from __future__ import annotations

import numpy as np

from .envs import Instruction

TOKEN_DIM = 16
BLOCK_SIZE = 8
N_BLOCKS = 2


def oracle_encoding(instruction: Instruction) -> np.ndarray:
    tokens = np.zeros(TOKEN_DIM, dtype=np.float64)
    for block, idx in enumerate(instruction.target_sequence[:N_BLOCKS]):
        if not 0 <= idx < BLOCK_SIZE:
            raise ValueError(f"target index {idx} does not fit an "
                             f"{BLOCK_SIZE}-slot block")
        tokens[block * BLOCK_SIZE + idx] = 1.0
    return tokens


class TokenProvider:
    """One planning-token call per episode; parameters frozen for a run."""

    name = "base"

    def __init__(self):
        self.episodes_started = 0
        self.total_calls = 0
        self._armed = False

    def begin_episode(self):
        self.episodes_started += 1
        self._armed = True

    def _encode(self, initial_observation, instruction, rng) -> np.ndarray:
        raise NotImplementedError


class OracleProvider(TokenProvider):
    """Domain-informed provider: exact one-hot blocks of the target sequence."""

    name = "oracle"

    def _encode(self, initial_observation, instruction, rng):
        return oracle_encoding(instruction)


class NoisyProvider(TokenProvider):
    """General-purpose surrogate: per-slot target misidentification with
    probability `p_corrupt`, plus i.i.d. Gaussian noise on every component."""

    name = "noisy"

    def __init__(self, sigma: float = 0.1, p_corrupt: float = 0.25):
        super().__init__()
        if sigma < 0 or not 0 <= p_corrupt <= 1:
            raise ValueError("sigma must be >= 0 and p_corrupt in [0, 1]")
        self.sigma = sigma
        self.p_corrupt = p_corrupt

    def _encode(self, initial_observation, instruction, rng):
        valid = min(instruction.object_count, BLOCK_SIZE)
        seq = list(instruction.target_sequence[:N_BLOCKS])
        for j in range(len(seq)):
            if rng.random() < self.p_corrupt:
                seq[j] = int(rng.integers(valid))
        corrupted = Instruction(instruction.task_id, tuple(seq),
                                instruction.object_count)
        tokens = oracle_encoding(corrupted)
        tokens += rng.normal(0.0, self.sigma, size=TOKEN_DIM)
        return tokens


class NullProvider(TokenProvider):
    """Vision-only baseline: tokens are identically zero."""

    name = "null"

    def _encode(self, initial_observation, instruction, rng):
        return np.zeros(TOKEN_DIM, dtype=np.float64)


def provide(provider: TokenProvider, initial_observation, instruction,
            episode_rng) -> np.ndarray:
    """Generate the episode's tokens.  Exactly one call per episode:
    a second call before the next begin_episode() is a hard error."""
    if not provider._armed:
        raise RuntimeError(f"token provider {provider.name!r} called more than "
                           "once in an episode (or before begin_episode)")
    provider._armed = False
    provider.total_calls += 1
    tokens = provider._encode(initial_observation, instruction, episode_rng)
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (TOKEN_DIM,) or not np.isfinite(tokens).all():
        raise ValueError("token provider produced a malformed vector")
    return tokens


def make_provider(name: str, sigma: float = 0.1,
                  p_corrupt: float = 0.25) -> TokenProvider:
    """Provider by CLI name: oracle | noisy | null."""
    if name == "oracle":
        return OracleProvider()
    if name == "noisy":
        return NoisyProvider(sigma=sigma, p_corrupt=p_corrupt)
    if name == "null":
        return NullProvider()
    raise ValueError(f"unknown token provider {name!r}")
