"""Five seeded grid surrogates of laparoscopic training tasks.

Each task runs on a 12x12 board rendered as a 3-channel 24x24 observation
(2x2 pixels per cell, values in {0, 0.5, 1}): channel 0 is the tool,
channel 1 the task objects, channel 2 visible goal markers.  The instructed
target is deliberately absent from the pixels; it lives only in the
`Instruction`, so goal identity must arrive through another channel
(planning tokens) or be guessed.

Object indices are anchored to fixed spatial regions (quadrants, column
bands, or fixed slots) so that an index is groundable in pixels once the
layout is visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .rng import SeededStreams

GRID = 12
CELL_PX = 2
OBS_SHAPE = (3, GRID * CELL_PX, GRID * CELL_PX)
HORIZON = 128
STEP_COST = -0.01
ADVANCE_REWARD = 1.0
FAIL_REWARD = -1.0
SHAPING_BETA = 0.05


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    INTERACT = 4


N_ACTIONS = len(Action)

_MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


class EnvKind(str, Enum):
    DEFLECT = "deflect"
    REACH = "reach"
    CUT = "cut"
    THREAD = "thread"
    PLACE = "place"


@dataclass(frozen=True)
class Instruction:
    task_id: str
    target_sequence: tuple
    object_count: int

    def __post_init__(self):
        if not 1 <= len(self.target_sequence) <= 3:
            raise ValueError("target_sequence must have 1 to 3 entries")
        if any(not 0 <= i < self.object_count for i in self.target_sequence):
            raise ValueError("target index out of range")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    success: bool
    info: dict


def manhattan(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _sample_cell(rng, rows, cols, exclude=()):
    """Uniform cell from rows x cols, rejecting cells in `exclude`."""
    exclude = set(exclude)
    while True:
        r = int(rng.integers(rows[0], rows[1] + 1))
        c = int(rng.integers(cols[0], cols[1] + 1))
        if (r, c) not in exclude:
            return (r, c)


# the tool always enters near the board center, like an instrument through
# a fixed port; keeps initial tool-to-target distances comparable across
# layouts
_START_ROWS = (5, 6)
_START_COLS = (5, 6)


def _sample_start(rng, exclude=()):
    return _sample_cell(rng, _START_ROWS, _START_COLS, exclude)


class SurgTask:
    """Common reset/step/render machinery; subclasses define task rules."""

    kind: EnvKind
    task_id: str

    def __init__(self, shaping: bool = True):
        self.shaping = shaping
        self.done = True
        self.success = False
        self.steps = 0
        self.tool = (0, 0)
        self.instruction = None

    # subclass hooks -------------------------------------------------------
    def _layout(self, rng):
        raise NotImplementedError

    def _sample_targets(self, rng) -> tuple:
        raise NotImplementedError

    def _validate_targets(self, seq: tuple):
        Instruction(self.task_id, tuple(seq), self._object_count())

    def _object_count(self) -> int:
        raise NotImplementedError

    def _interact(self):
        """Resolve INTERACT: (reward, done, success, event)."""
        raise NotImplementedError

    def _after_move(self):
        """Hook for movement-triggered outcomes: None or (reward, success)."""
        return None

    def _current_goal(self):
        """Cell the agent should currently approach (shaping and oracle)."""
        raise NotImplementedError

    def _paint(self, objects: np.ndarray, markers: np.ndarray):
        raise NotImplementedError

    def goal_cells(self) -> tuple:
        """Cells tied to the instructed targets (analysis metadata, never rendered)."""
        raise NotImplementedError

    # shared machinery -------------------------------------------------------
    def reset(self, seed: int, target_override=None):
        streams = SeededStreams(seed)
        self._layout(streams.stream("layout"))
        if target_override is not None:
            targets = tuple(int(i) for i in target_override)
        else:
            targets = self._sample_targets(streams.stream("instruction"))
        self._validate_targets(targets)
        self.instruction = Instruction(self.task_id, targets, self._object_count())
        self.done = False
        self.success = False
        self.steps = 0
        return self.render(), self.instruction

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError(f"{self.task_id}: step() called on a finished "
                               "episode; call reset() first")
        action = Action(action)
        self.steps += 1
        event = "noop"
        success = False
        done = False
        if action == Action.INTERACT:
            reward, done, success, event = self._interact()
        else:
            goal = self._current_goal()
            d_prev = manhattan(self.tool, goal)
            dr, dc = _MOVES[action]
            self.tool = (min(max(self.tool[0] + dr, 0), GRID - 1),
                         min(max(self.tool[1] + dc, 0), GRID - 1))
            event = "move"
            moved = self._after_move()
            if moved is not None:
                reward, success = moved
                done = True
                event = "success"
            else:
                reward = STEP_COST
                if self.shaping:
                    reward += SHAPING_BETA * (d_prev - manhattan(self.tool, goal))
        if not done and self.steps >= HORIZON:
            done = True
        self.done = done
        self.success = success
        return StepResult(self.render(), float(reward), done, success,
                          {"tool_cell": self.tool, "event": event})

    def render(self) -> np.ndarray:
        board = np.zeros((3, GRID, GRID), dtype=np.float64)
        board[0][self.tool] = 1.0
        self._paint(board[1], board[2])
        return board.repeat(CELL_PX, axis=1).repeat(CELL_PX, axis=2)

    def oracle_action(self) -> Action:
        """Scripted expert action from privileged state (solvability witness)."""
        goal, interact_there = self._oracle_plan()
        if self.tool == goal:
            return Action.INTERACT if interact_there else Action.UP
        dr = goal[0] - self.tool[0]
        if dr != 0:
            return Action.DOWN if dr > 0 else Action.UP
        return Action.RIGHT if goal[1] - self.tool[1] > 0 else Action.LEFT

    def _oracle_plan(self):
        return self._current_goal(), True


class DeflectLite(SurgTask):
    """Deflect the instructed sphere; touching any other sphere fails.

    Four spheres, one per board quadrant (quadrant index = sphere index).
    """

    kind = EnvKind.DEFLECT
    task_id = "deflect"

    _QUADRANTS = (((1, 4), (1, 4)), ((1, 4), (7, 10)),
                  ((7, 10), (1, 4)), ((7, 10), (7, 10)))

    def _layout(self, rng):
        self.spheres = [_sample_cell(rng, rows, cols)
                        for rows, cols in self._QUADRANTS]
        self.tool = _sample_start(rng, exclude=self.spheres)

    def _sample_targets(self, rng):
        return (int(rng.integers(4)),)

    def _object_count(self):
        return 4

    @property
    def _target(self):
        return self.instruction.target_sequence[0]

    def _current_goal(self):
        return self.spheres[self._target]

    def _interact(self):
        if self.tool == self.spheres[self._target]:
            return ADVANCE_REWARD, True, True, "success"
        if self.tool in self.spheres:
            return FAIL_REWARD, True, False, "fail"
        return STEP_COST, False, False, "noop"

    def _paint(self, objects, markers):
        for cell in self.spheres:
            objects[cell] = 1.0

    def goal_cells(self):
        return (self.spheres[self._target],)


class ReachLite(SurgTask):
    """Grasp the instructed landmark and drag it to within one cell of the
    visible goal marker; success fires on arrival.

    Three landmarks, one per 4-column band (band index = landmark index).
    """

    kind = EnvKind.REACH
    task_id = "reach"

    _BANDS = ((0, 3), (4, 7), (8, 11))
    TOLERANCE = 1

    def _layout(self, rng):
        self.landmarks = [_sample_cell(rng, (1, GRID - 2), cols)
                          for cols in self._BANDS]
        while True:
            goal = _sample_cell(rng, (0, GRID - 1), (0, GRID - 1))
            if all(manhattan(goal, lm) > self.TOLERANCE + 1 for lm in self.landmarks):
                break
        self.goal = goal
        self.tool = _sample_start(rng, exclude=self.landmarks)
        self.held = False

    def _sample_targets(self, rng):
        return (int(rng.integers(3)),)

    def _object_count(self):
        return 3

    @property
    def _target(self):
        return self.instruction.target_sequence[0]

    def _current_goal(self):
        return self.goal if self.held else self.landmarks[self._target]

    def _interact(self):
        if not self.held and self.tool == self.landmarks[self._target]:
            self.held = True
            return ADVANCE_REWARD, False, False, "grasp"
        return STEP_COST, False, False, "noop"

    def _after_move(self):
        # while held the landmark rides on the tool
        if self.held and manhattan(self.tool, self.goal) <= self.TOLERANCE:
            return ADVANCE_REWARD, True
        return None

    def _paint(self, objects, markers):
        for i, cell in enumerate(self.landmarks):
            if self.held and i == self._target:
                objects[self.tool] = 0.5
            else:
                objects[cell] = 1.0
        markers[self.goal] = 1.0

    def goal_cells(self):
        return (self.landmarks[self._target], self.goal)

    def _oracle_plan(self):
        if self.held:
            return self.goal, False
        return self.landmarks[self._target], True


class CutLite(SurgTask):
    """Cut two instructed ropes in order; cutting any other rope fails.

    Four ropes hang at fixed columns (left-to-right index), rows 2..9.
    """

    kind = EnvKind.CUT
    task_id = "cut"

    COLUMNS = (1, 4, 7, 10)
    ROW_LO, ROW_HI = 2, 9

    def _layout(self, rng):
        self.cut = [False] * 4
        self.progress = 0
        # start below the rope field: rows 10-11 are rope-free, so paths to
        # any column need not cross other ropes
        self.tool = _sample_cell(rng, (self.ROW_HI + 1, GRID - 1),
                                 _START_COLS)

    def _sample_targets(self, rng):
        order = rng.permutation(4)
        return (int(order[0]), int(order[1]))

    def _object_count(self):
        return 4

    def _rope_at(self, cell):
        r, c = cell
        if self.ROW_LO <= r <= self.ROW_HI and c in self.COLUMNS:
            idx = self.COLUMNS.index(c)
            if not self.cut[idx]:
                return idx
        return None

    def _current_goal(self):
        target = self.instruction.target_sequence[self.progress]
        row = min(max(self.tool[0], self.ROW_LO), self.ROW_HI)
        return (row, self.COLUMNS[target])

    def _interact(self):
        rope = self._rope_at(self.tool)
        if rope is None:
            return STEP_COST, False, False, "noop"
        if rope == self.instruction.target_sequence[self.progress]:
            self.cut[rope] = True
            self.progress += 1
            if self.progress == len(self.instruction.target_sequence):
                return ADVANCE_REWARD, True, True, "success"
            return ADVANCE_REWARD, False, False, "advance"
        return FAIL_REWARD, True, False, "fail"

    def _paint(self, objects, markers):
        for idx, col in enumerate(self.COLUMNS):
            if not self.cut[idx]:
                objects[self.ROW_LO:self.ROW_HI + 1, col] = 1.0

    def goal_cells(self):
        return tuple((r, self.COLUMNS[t])
                     for t in self.instruction.target_sequence
                     for r in range(self.ROW_LO, self.ROW_HI + 1))


class ThreadLite(SurgTask):
    """Visit the three eyelets in the instructed order; out-of-order visits
    are no-ops, never failures.

    One eyelet per 4-column band (band index = eyelet index); threaded
    eyelets render at half intensity.
    """

    kind = EnvKind.THREAD
    task_id = "thread"

    _BANDS = ((0, 3), (4, 7), (8, 11))

    def _layout(self, rng):
        self.eyelets = [_sample_cell(rng, (1, GRID - 2), cols)
                        for cols in self._BANDS]
        self.threaded = [False] * 3
        self.progress = 0
        self.tool = _sample_start(rng, exclude=self.eyelets)

    def _sample_targets(self, rng):
        return tuple(int(i) for i in rng.permutation(3))

    def _object_count(self):
        return 3

    def _current_goal(self):
        return self.eyelets[self.instruction.target_sequence[self.progress]]

    def _interact(self):
        if self.tool in self.eyelets:
            idx = self.eyelets.index(self.tool)
            if not self.threaded[idx] and \
                    idx == self.instruction.target_sequence[self.progress]:
                self.threaded[idx] = True
                self.progress += 1
                if self.progress == 3:
                    return ADVANCE_REWARD, True, True, "success"
                return ADVANCE_REWARD, False, False, "advance"
        return STEP_COST, False, False, "noop"

    def _paint(self, objects, markers):
        for idx, cell in enumerate(self.eyelets):
            objects[cell] = 0.5 if self.threaded[idx] else 1.0

    def goal_cells(self):
        return tuple(self.eyelets)


class PlaceLite(SurgTask):
    """Grasp the torus, carry it, and release it on the instructed peg;
    releasing on any other peg fails.

    Nine pegs sit at a fixed 3x3 lattice (row-major index); only pegs 0..7
    are ever instructed, peg 8 is a pure distractor.
    """

    kind = EnvKind.PLACE
    task_id = "place"

    PEGS = tuple((r, c) for r in (2, 6, 10) for c in (2, 6, 10))
    INSTRUCTABLE = 8

    def _layout(self, rng):
        self.torus = _sample_cell(rng, (0, GRID - 1), (0, GRID - 1),
                                  exclude=self.PEGS)
        self.tool = _sample_start(rng, exclude=[self.torus])
        self.held = False

    def _sample_targets(self, rng):
        return (int(rng.integers(self.INSTRUCTABLE)),)

    def _object_count(self):
        return len(self.PEGS)

    @property
    def _target(self):
        return self.instruction.target_sequence[0]

    def _current_goal(self):
        return self.PEGS[self._target] if self.held else self.torus

    def _interact(self):
        if not self.held:
            if self.tool == self.torus:
                self.held = True
                return ADVANCE_REWARD, False, False, "grasp"
            return STEP_COST, False, False, "noop"
        if self.tool in self.PEGS:
            if self.tool == self.PEGS[self._target]:
                return ADVANCE_REWARD, True, True, "success"
            return FAIL_REWARD, True, False, "fail"
        return STEP_COST, False, False, "noop"

    def _paint(self, objects, markers):
        if self.held:
            objects[self.tool] = 0.5
        else:
            objects[self.torus] = 1.0
        for peg in self.PEGS:
            markers[peg] = 1.0

    def goal_cells(self):
        return (self.torus, self.PEGS[self._target])


_ENV_CLASSES = {
    EnvKind.DEFLECT: DeflectLite,
    EnvKind.REACH: ReachLite,
    EnvKind.CUT: CutLite,
    EnvKind.THREAD: ThreadLite,
    EnvKind.PLACE: PlaceLite,
}


def make_env(kind, shaping: bool = True) -> SurgTask:
    """Environment by kind or CLI name: deflect | reach | cut | thread | place."""
    kind = EnvKind(kind)
    return _ENV_CLASSES[kind](shaping=shaping)


def run_scripted(env: SurgTask, seed: int, max_steps: int = HORIZON):
    """Roll one episode with the scripted expert; returns (success, steps, return)."""
    env.reset(seed)
    total = 0.0
    for step in range(max_steps):
        result = env.step(env.oracle_action())
        total += result.reward
        if result.done:
            return result.success, step + 1, total
    return False, max_steps, total
