"""Token-conditioned PPO on deterministic grid surrogates of laparoscopic
training tasks, built on a small manually-differentiated numeric core."""

from .envs import Action, EnvKind, Instruction, StepResult, make_env
from .harness import EvalReport, RunConfig, evaluate, gradcheck, heatmap, train
from .mathcore import AdamConfig, ParamStore
from .nets import NetConfig, PolicyNetworks, load_checkpoint, save_checkpoint
from .ppo import PPOConfig, RolloutBuffer, compute_gae
from .rng import SeededStreams
from .tokens import make_provider, provide

__version__ = "0.1.0"

__all__ = [
    "Action", "AdamConfig", "EnvKind", "EvalReport", "Instruction",
    "NetConfig", "ParamStore", "PPOConfig", "PolicyNetworks", "RolloutBuffer",
    "RunConfig", "SeededStreams", "StepResult", "compute_gae", "evaluate",
    "gradcheck", "heatmap", "load_checkpoint", "make_env", "make_provider",
    "provide", "save_checkpoint", "train", "__version__",
]
