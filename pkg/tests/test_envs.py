import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surgrl.envs import (
    GRID, HORIZON, OBS_SHAPE, Action, CutLite, DeflectLite, EnvKind,
    Instruction, PlaceLite, ReachLite, SurgTask, ThreadLite, make_env,
    manhattan, run_scripted,
)

ALL_KINDS = [k.value for k in EnvKind]

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def flipped_targets(env: SurgTask, seq):
    """A valid target sequence different from `seq`."""
    if isinstance(env, DeflectLite):
        return ((seq[0] + 1) % 4,)
    if isinstance(env, ReachLite):
        return ((seq[0] + 1) % 3,)
    if isinstance(env, CutLite):
        return (seq[1], seq[0])
    if isinstance(env, ThreadLite):
        return (seq[1], seq[0], seq[2])
    return ((seq[0] + 1) % PlaceLite.INSTRUCTABLE,)


# ---------------------------------------------------------------------------
# reset
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ALL_KINDS)
def test_reset_deterministic(kind):
    env1, env2 = make_env(kind), make_env(kind)
    obs1, ins1 = env1.reset(903)
    obs2, ins2 = env2.reset(903)
    assert np.array_equal(obs1, obs2)
    assert ins1 == ins2


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_deflect_instruction_construction(seed):
    _, ins = make_env("deflect").reset(seed)
    assert len(ins.target_sequence) == 1
    assert 0 <= ins.target_sequence[0] < 4
    assert ins.object_count == 4


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_cut_instruction_construction(seed):
    _, ins = make_env("cut").reset(seed)
    assert len(ins.target_sequence) == 2
    assert ins.target_sequence[0] != ins.target_sequence[1]
    assert all(0 <= t < 4 for t in ins.target_sequence)


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_thread_instruction_is_permutation(seed):
    _, ins = make_env("thread").reset(seed)
    assert sorted(ins.target_sequence) == [0, 1, 2]


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_place_instruction_within_encodable_range(seed):
    _, ins = make_env("place").reset(seed)
    assert len(ins.target_sequence) == 1
    assert 0 <= ins.target_sequence[0] < 8
    assert ins.object_count == 9


def test_instruction_validation():
    with pytest.raises(ValueError):
        Instruction("deflect", (), 4)
    with pytest.raises(ValueError):
        Instruction("deflect", (4,), 4)


# ---------------------------------------------------------------------------
# information gap
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("seed", [0, 11, 902, 77777])
def test_initial_observation_independent_of_target(kind, seed):
    env = make_env(kind)
    obs1, ins1 = env.reset(seed)
    obs2, ins2 = env.reset(seed, target_override=flipped_targets(env,
                                                                 ins1.target_sequence))
    assert ins2.target_sequence != ins1.target_sequence
    assert np.array_equal(obs1, obs2)


# ---------------------------------------------------------------------------
# step mechanics
# ---------------------------------------------------------------------------

def test_movement_translates_tool_with_step_cost():
    env = make_env("deflect", shaping=False)
    env.reset(5)
    env.tool = (3, 3)
    result = env.step(Action.RIGHT)
    assert result.info["tool_cell"] == (3, 4)
    assert result.reward == -0.01
    assert not result.done


def test_movement_clamped_at_borders():
    env = make_env("deflect", shaping=False)
    env.reset(5)
    env.tool = (0, 0)
    assert env.step(Action.UP).info["tool_cell"] == (0, 0)
    assert env.step(Action.LEFT).info["tool_cell"] == (0, 0)


def test_shaping_rewards_progress_toward_goal():
    env = make_env("deflect", shaping=True)
    env.reset(5)
    goal = env.spheres[env.instruction.target_sequence[0]]
    env.tool = (goal[0], max(goal[1] - 3, 0) if goal[1] >= 3 else goal[1] + 3)
    towards = Action.RIGHT if env.tool[1] < goal[1] else Action.LEFT
    result = env.step(towards)
    assert result.reward == pytest.approx(-0.01 + 0.05)


def test_deflect_interact_on_target_succeeds():
    env = make_env("deflect")
    env.reset(5)
    env.tool = env.spheres[env.instruction.target_sequence[0]]
    result = env.step(Action.INTERACT)
    assert (result.reward, result.done, result.success) == (1.0, True, True)


def test_deflect_interact_on_distractor_fails():
    env = make_env("deflect")
    _, ins = env.reset(5)
    wrong = (ins.target_sequence[0] + 1) % 4
    env.tool = env.spheres[wrong]
    result = env.step(Action.INTERACT)
    assert (result.reward, result.done, result.success) == (-1.0, True, False)


def test_interact_on_empty_cell_is_noop():
    env = make_env("deflect", shaping=False)
    env.reset(5)
    free = next((r, c) for r in range(GRID) for c in range(GRID)
                if (r, c) not in env.spheres)
    env.tool = free
    result = env.step(Action.INTERACT)
    assert result.reward == -0.01
    assert not result.done


def test_step_after_done_rejected():
    env = make_env("deflect")
    env.reset(5)
    env.tool = env.spheres[env.instruction.target_sequence[0]]
    env.step(Action.INTERACT)
    with pytest.raises(RuntimeError):
        env.step(Action.UP)


def test_horizon_terminates_without_success():
    env = make_env("thread", shaping=False)
    env.reset(5)
    result = None
    for _ in range(HORIZON):
        result = env.step(Action.UP)
    assert result.done and not result.success
    assert env.steps == HORIZON


def test_cut_wrong_rope_fails():
    env = make_env("cut")
    _, ins = env.reset(5)
    wrong = next(i for i in range(4) if i not in ins.target_sequence)
    env.tool = (4, CutLite.COLUMNS[wrong])
    result = env.step(Action.INTERACT)
    assert (result.reward, result.done, result.success) == (-1.0, True, False)


def test_cut_sequence_in_order_succeeds():
    env = make_env("cut")
    _, ins = env.reset(5)
    first, second = ins.target_sequence
    env.tool = (4, CutLite.COLUMNS[first])
    mid = env.step(Action.INTERACT)
    assert (mid.reward, mid.done) == (1.0, False)
    assert mid.info["event"] == "advance"
    env.tool = (4, CutLite.COLUMNS[second])
    result = env.step(Action.INTERACT)
    assert (result.reward, result.done, result.success) == (1.0, True, True)


def test_cut_second_rope_first_fails():
    env = make_env("cut")
    _, ins = env.reset(5)
    env.tool = (4, CutLite.COLUMNS[ins.target_sequence[1]])
    result = env.step(Action.INTERACT)
    assert (result.done, result.success) == (True, False)


def test_cut_rope_disappears_from_observation():
    env = make_env("cut")
    _, ins = env.reset(5)
    col = CutLite.COLUMNS[ins.target_sequence[0]]
    before = env.render()[1, :, 2 * col]
    env.tool = (4, col)
    after = env.step(Action.INTERACT).observation[1, :, 2 * col]
    assert before.any() and not after.any()


def test_thread_out_of_order_is_noop():
    env = make_env("thread", shaping=False)
    _, ins = env.reset(5)
    later = ins.target_sequence[1]
    env.tool = env.eyelets[later]
    result = env.step(Action.INTERACT)
    assert result.reward == -0.01
    assert not result.done
    assert not env.threaded[later]


def test_thread_full_sequence_succeeds():
    env = make_env("thread")
    _, ins = env.reset(5)
    rewards = []
    for idx in ins.target_sequence:
        env.tool = env.eyelets[idx]
        rewards.append(env.step(Action.INTERACT))
    assert [r.reward for r in rewards] == [1.0, 1.0, 1.0]
    assert rewards[-1].success and rewards[-1].done
    assert not rewards[0].done and not rewards[1].done


def test_threaded_eyelet_renders_half_intensity():
    env = make_env("thread")
    _, ins = env.reset(5)
    first = ins.target_sequence[0]
    cell = env.eyelets[first]
    env.tool = cell
    obs = env.step(Action.INTERACT).observation
    assert np.all(obs[1, 2 * cell[0]:2 * cell[0] + 2,
                      2 * cell[1]:2 * cell[1] + 2] == 0.5)


def test_reach_grasp_then_deliver():
    env = make_env("reach", shaping=False)
    _, ins = env.reset(5)
    target = ins.target_sequence[0]
    env.tool = env.landmarks[target]
    grasp = env.step(Action.INTERACT)
    assert (grasp.reward, grasp.done) == (1.0, False)
    assert grasp.info["event"] == "grasp"
    assert env.held
    # walk to the goal; success fires on proximity, with a flat +1
    result = None
    for _ in range(64):
        result = env.step(env.oracle_action())
        if result.done:
            break
    assert result.success
    assert result.reward == 1.0
    assert manhattan(result.info["tool_cell"], env.goal) <= ReachLite.TOLERANCE


def test_reach_wrong_landmark_is_noop():
    env = make_env("reach", shaping=False)
    _, ins = env.reset(5)
    wrong = (ins.target_sequence[0] + 1) % 3
    env.tool = env.landmarks[wrong]
    result = env.step(Action.INTERACT)
    assert result.reward == -0.01
    assert not env.held
    assert not result.done


def test_reach_held_landmark_rides_on_tool():
    env = make_env("reach")
    _, ins = env.reset(5)
    env.tool = env.landmarks[ins.target_sequence[0]]
    env.step(Action.INTERACT)
    moved = env.step(env.oracle_action())
    tool = moved.info["tool_cell"]
    patch = moved.observation[1, 2 * tool[0]:2 * tool[0] + 2,
                              2 * tool[1]:2 * tool[1] + 2]
    assert np.all(patch == 0.5)


def test_place_grasp_carry_release():
    env = make_env("place", shaping=False)
    _, ins = env.reset(5)
    env.tool = env.torus
    grasp = env.step(Action.INTERACT)
    assert (grasp.reward, grasp.done) == (1.0, False)
    assert env.held
    env.tool = PlaceLite.PEGS[ins.target_sequence[0]]
    result = env.step(Action.INTERACT)
    assert (result.reward, result.done, result.success) == (1.0, True, True)


def test_place_wrong_peg_fails_only_when_holding():
    env = make_env("place", shaping=False)
    _, ins = env.reset(5)
    wrong_peg = PlaceLite.PEGS[(ins.target_sequence[0] + 1) % 8]
    env.tool = wrong_peg
    without = env.step(Action.INTERACT)
    assert without.reward == -0.01 and not without.done
    env.tool = env.torus
    env.step(Action.INTERACT)
    env.tool = wrong_peg
    result = env.step(Action.INTERACT)
    assert (result.reward, result.done, result.success) == (-1.0, True, False)


def test_place_distractor_peg_fails_too():
    env = make_env("place", shaping=False)
    env.reset(5, target_override=(0,))
    env.tool = env.torus
    env.step(Action.INTERACT)
    env.tool = PlaceLite.PEGS[8]
    result = env.step(Action.INTERACT)
    assert (result.done, result.success) == (True, False)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ALL_KINDS)
def test_render_tool_footprint_and_values(kind):
    env = make_env(kind)
    obs, _ = env.reset(31)
    assert obs.shape == OBS_SHAPE
    assert obs[0].sum() == 4.0  # one 2x2 tool cell
    assert set(np.unique(obs)) <= {0.0, 0.5, 1.0}


@pytest.mark.parametrize("kind,empty", [("deflect", True), ("cut", True),
                                        ("thread", True), ("reach", False),
                                        ("place", False)])
def test_marker_channel_visibility(kind, empty):
    obs, _ = make_env(kind).reset(13)
    assert (not obs[2].any()) == empty


def test_deflect_target_sphere_rendered_like_distractors():
    env = make_env("deflect")
    env.reset(13)
    obs = env.render()
    for cell in env.spheres:
        patch = obs[1, 2 * cell[0]:2 * cell[0] + 2, 2 * cell[1]:2 * cell[1] + 2]
        assert np.all(patch == 1.0)


def test_place_pegs_in_marker_channel():
    env = make_env("place")
    obs, _ = env.reset(13)
    for peg in PlaceLite.PEGS:
        patch = obs[2, 2 * peg[0]:2 * peg[0] + 2, 2 * peg[1]:2 * peg[1] + 2]
        assert np.all(patch == 1.0)
    assert obs[2].sum() == 4.0 * 9


# ---------------------------------------------------------------------------
# whole-episode properties
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ALL_KINDS)
def test_scripted_oracle_solves_every_seed(kind):
    for seed in range(60):
        success, steps, _ = run_scripted(make_env(kind), seed)
        assert success, f"{kind} seed {seed}"
        assert steps <= HORIZON


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_reward_bounds_under_random_play(kind):
    rng = np.random.default_rng(7)
    for seed in range(10):
        env = make_env(kind)
        env.reset(seed)
        done = False
        while not done:
            result = env.step(int(rng.integers(5)))
            assert -1.01 <= result.reward <= 1.0
            done = result.done
            assert result.success == (result.success and result.done)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_shaping_changes_returns_not_outcomes(kind):
    rng = np.random.default_rng(3)
    for seed in range(8):
        actions = [int(a) for a in rng.integers(5, size=HORIZON)]
        outcomes = []
        returns = []
        for shaping in (False, True):
            env = make_env(kind, shaping=shaping)
            env.reset(seed)
            total, result = 0.0, None
            for action in actions:
                result = env.step(action)
                total += result.reward
                if result.done:
                    break
            outcomes.append((result.success, env.steps))
            returns.append(total)
        assert outcomes[0] == outcomes[1]


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_episode_ends_within_horizon(kind):
    env = make_env(kind)
    env.reset(2)
    for _ in range(HORIZON):
        if env.step(Action.DOWN).done:
            break
    assert env.done
    assert env.steps <= HORIZON


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_goal_cells_are_on_grid(kind):
    env = make_env(kind)
    env.reset(9)
    for cell in env.goal_cells():
        assert 0 <= cell[0] < GRID and 0 <= cell[1] < GRID
