"""Deterministic grid-world MDPs with exact unsafety labelling.

Two families are provided:

* ``FrozenLakeEnv``: reach the goal, holes are unsafe and terminal. The
  observation is a one-hot position concatenated with a one-hot task id, so a
  single actor can serve both tasks.
* ``PoisonedAppleEnv``: collect every safe apple; poisoned apples are unsafe
  but do not end the episode. The observation is the flat grid with
  ``0=empty, 1=agent, 2=safe apple, 3=poisoned apple``.

Environments are pure value transformers: ``step`` maps an ``EnvState`` to a
``StepOutcome`` without mutating anything, so they can be shared freely.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

LEFT, DOWN, RIGHT, UP = 0, 1, 2, 3
ACTION_NAMES = ("Left", "Down", "Right", "Up")
N_ACTIONS = 4
_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))

FROZENLAKE = "frozenlake"
POISONED_APPLE = "poisoned_apple"

_FL_CHARS = {"S": "Start", "F": "Frozen", "H": "Hole", "G": "Goal"}
_PA_CHARS = {".": "Empty", "s": "SafeApple", "p": "PoisonedApple", "A": "AgentStart"}

# built-in layout name -> environment family
BUILTIN_LAYOUTS = {
    "standard_4x4": FROZENLAKE,
    "diagonal_4x4": FROZENLAKE,
    "diagonal_6x6": FROZENLAKE,
    "diagonal_8x8": FROZENLAKE,
    "simple_5x5": POISONED_APPLE,
}


class LayoutError(ValueError):
    """Unknown layout name or malformed layout file."""


class TerminalStateError(RuntimeError):
    """Raised when stepping (or labelling) a terminal state."""


class SafeActionError(RuntimeError):
    """A reachable state has no safe action at all."""


class StateCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class GridLayout:
    name: str
    kind: str
    rows: int
    cols: int
    cells: tuple[str, ...]

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise LayoutError(f"{self.name}: grid must be non-empty")
        if len(self.cells) != self.rows * self.cols:
            raise LayoutError(f"{self.name}: expected {self.rows * self.cols} cells")
        chars = _FL_CHARS if self.kind == FROZENLAKE else _PA_CHARS
        bad = set(self.cells) - set(chars)
        if bad:
            raise LayoutError(f"{self.name}: unexpected characters {sorted(bad)}")
        start = "S" if self.kind == FROZENLAKE else "A"
        if self.cells.count(start) != 1:
            raise LayoutError(f"{self.name}: need exactly one start cell")
        if self.kind == FROZENLAKE and self.cells.count("G") != 1:
            raise LayoutError(f"{self.name}: need exactly one goal cell")

    @classmethod
    def from_text(cls, name: str, text: str, kind: str | None = None) -> "GridLayout":
        rows = [ln.strip() for ln in text.splitlines()]
        rows = [r for r in rows if r and not r.startswith("#")]
        if not rows:
            raise LayoutError(f"{name}: empty layout")
        if len({len(r) for r in rows}) != 1:
            raise LayoutError(f"{name}: ragged rows")
        flat = "".join(rows)
        if kind is None:
            if set(flat) <= set(_FL_CHARS):
                kind = FROZENLAKE
            elif set(flat) <= set(_PA_CHARS):
                kind = POISONED_APPLE
            else:
                raise LayoutError(f"{name}: cannot infer layout kind")
        return cls(name, kind, len(rows), len(rows[0]), tuple(flat))

    def to_text(self) -> str:
        return "\n".join(
            "".join(self.cells[r * self.cols:(r + 1) * self.cols]) for r in range(self.rows)
        ) + "\n"

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cells_of(self, char: str) -> list[int]:
        return [i for i, c in enumerate(self.cells) if c == char]

    def start_cell(self) -> int:
        return self.cells.index("S" if self.kind == FROZENLAKE else "A")


def load_layout(name: str, task: int = 1) -> GridLayout:
    """Load a built-in layout (``name``, ``task``) or a layout file path."""
    path = Path(name)
    if path.suffix == ".txt" or path.exists():
        try:
            text = path.read_text()
        except OSError as exc:
            raise LayoutError(f"cannot read layout file {name}: {exc}") from exc
        return GridLayout.from_text(path.stem, text)
    if name not in BUILTIN_LAYOUTS:
        raise LayoutError(f"unknown layout {name!r}")
    if task not in (1, 2):
        raise LayoutError(f"task must be 1 or 2, got {task}")
    fname = f"{name}_task{task}.txt"
    text = resources.files("safeadapt.layouts").joinpath(fname).read_text()
    return GridLayout.from_text(name, text, BUILTIN_LAYOUTS[name])


@dataclass(frozen=True)
class EnvState:
    """Agent cell plus task id (FrozenLake) or remaining-apple mask (PoisonedApple).

    ``steps`` only drives truncation; it is not part of the state identity.
    """

    cell: int
    task: int = 1
    apples: int = 0
    steps: int = 0

    def key(self) -> tuple[int, int, int]:
        return (self.cell, self.task, self.apples)

    def to_json(self) -> dict:
        return {"cell": self.cell, "task": self.task, "apples": self.apples}

    @classmethod
    def from_json(cls, d: dict) -> "EnvState":
        return cls(int(d["cell"]), int(d.get("task", 1)), int(d.get("apples", 0)))


@dataclass(frozen=True)
class StepOutcome:
    next: EnvState
    reward: float
    done: bool
    unsafe: bool
    success: bool = False
    truncated: bool = False


class GridEnv:
    """Shared grid movement; off-grid moves leave the agent in place."""

    kind = ""
    n_actions = N_ACTIONS

    def __init__(self, layout: GridLayout, task: int, max_steps: int):
        self.layout = layout
        self.task = task
        self.max_steps = max_steps

    @property
    def name(self) -> str:
        return self.layout.name

    def move(self, cell: int, action: int) -> int:
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action must be in 0..3, got {action}")
        r, c = divmod(cell, self.layout.cols)
        dr, dc = _MOVES[action]
        nr, nc = r + dr, c + dc
        if 0 <= nr < self.layout.rows and 0 <= nc < self.layout.cols:
            return nr * self.layout.cols + nc
        return cell

    def unsafety_label(self, state: EnvState, action: int) -> int:
        if self.is_terminal(state):
            raise TerminalStateError("unsafety label undefined at terminal state")
        return int(self._enters_unsafe(state, action))

    def safe_action_set(self, state: EnvState) -> np.ndarray:
        return np.array(
            [self.unsafety_label(state, a) == 0 for a in range(N_ACTIONS)], dtype=bool
        )

    # subclasses implement these
    def initial_state(self) -> EnvState:
        raise NotImplementedError

    def is_terminal(self, state: EnvState) -> bool:
        raise NotImplementedError

    def step(self, state: EnvState, action: int) -> StepOutcome:
        raise NotImplementedError

    def encode(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def _enters_unsafe(self, state: EnvState, action: int) -> bool:
        raise NotImplementedError

    def _transitions(self, state: EnvState) -> Iterable[EnvState]:
        for a in range(N_ACTIONS):
            yield self.step(state, a).next

    @property
    def obs_dim(self) -> int:
        raise NotImplementedError


class FrozenLakeEnv(GridEnv):
    kind = FROZENLAKE

    def __init__(self, layout: GridLayout, task: int = 1, max_steps: int = 100):
        if layout.kind != FROZENLAKE:
            raise LayoutError(f"{layout.name} is not a FrozenLake layout")
        super().__init__(layout, task, max_steps)
        self._holes = frozenset(layout.cells_of("H"))
        self._goal = layout.cells.index("G")

    @property
    def obs_dim(self) -> int:
        return self.layout.n_cells + 2

    def initial_state(self) -> EnvState:
        return EnvState(self.layout.start_cell(), self.task)

    def is_terminal(self, state: EnvState) -> bool:
        return (
            state.cell in self._holes
            or state.cell == self._goal
            or state.steps >= self.max_steps
        )

    def _enters_unsafe(self, state, action):
        return self.move(state.cell, action) in self._holes

    def step(self, state: EnvState, action: int) -> StepOutcome:
        if self.is_terminal(state):
            raise TerminalStateError(f"state {state} is terminal")
        cell = self.move(state.cell, action)
        nxt = EnvState(cell, state.task, 0, state.steps + 1)
        goal = cell == self._goal
        hole = cell in self._holes
        truncated = not (goal or hole) and nxt.steps >= self.max_steps
        return StepOutcome(
            nxt, 1.0 if goal else 0.0, goal or hole or truncated, hole, goal, truncated
        )

    def encode(self, state: EnvState) -> np.ndarray:
        x = np.zeros(self.obs_dim)
        x[state.cell] = 1.0
        x[self.layout.n_cells + state.task - 1] = 1.0
        return x


class PoisonedAppleEnv(GridEnv):
    kind = POISONED_APPLE

    def __init__(
        self,
        layout: GridLayout,
        task: int = 1,
        max_steps: int = 200,
        step_penalty: float = 0.01,
    ):
        if layout.kind != POISONED_APPLE:
            raise LayoutError(f"{layout.name} is not a PoisonedApple layout")
        super().__init__(layout, task, max_steps)
        self.step_penalty = step_penalty
        # bit k of the apple mask <-> self._apple_cells[k]
        self._apple_cells = tuple(
            i for i, c in enumerate(layout.cells) if c in ("s", "p")
        )
        self._bit = {cell: k for k, cell in enumerate(self._apple_cells)}
        self._poisoned = frozenset(layout.cells_of("p"))
        self._safe_bits = sum(
            1 << k for k, cell in enumerate(self._apple_cells) if cell not in self._poisoned
        )

    @property
    def obs_dim(self) -> int:
        return self.layout.n_cells

    def initial_state(self) -> EnvState:
        return EnvState(self.layout.start_cell(), self.task, (1 << len(self._apple_cells)) - 1)

    def is_terminal(self, state: EnvState) -> bool:
        return (state.apples & self._safe_bits) == 0 or state.steps >= self.max_steps

    def _has_apple(self, state: EnvState, cell: int) -> bool:
        k = self._bit.get(cell)
        return k is not None and bool(state.apples >> k & 1)

    def _enters_unsafe(self, state, action):
        cell = self.move(state.cell, action)
        return cell in self._poisoned and self._has_apple(state, cell)

    def step(self, state: EnvState, action: int) -> StepOutcome:
        if self.is_terminal(state):
            raise TerminalStateError(f"state {state} is terminal")
        cell = self.move(state.cell, action)
        reward = -self.step_penalty
        apples = state.apples
        unsafe = False
        if self._has_apple(state, cell):
            apples &= ~(1 << self._bit[cell])
            if cell in self._poisoned:
                reward -= 1.0
                unsafe = True
            else:
                reward += 1.0
        nxt = EnvState(cell, state.task, apples, state.steps + 1)
        success = (apples & self._safe_bits) == 0
        truncated = not success and nxt.steps >= self.max_steps
        return StepOutcome(nxt, reward, success or truncated, unsafe, success, truncated)

    def encode(self, state: EnvState) -> np.ndarray:
        x = np.zeros(self.obs_dim)
        for k, cell in enumerate(self._apple_cells):
            if state.apples >> k & 1:
                x[cell] = 3.0 if cell in self._poisoned else 2.0
        x[state.cell] = 1.0
        return x


def make_env(name: str, task: int = 1, **kwargs) -> GridEnv:
    """Build an environment from a built-in layout name or a layout file path."""
    layout = load_layout(name, task)
    if layout.kind == FROZENLAKE:
        return FrozenLakeEnv(layout, task, **kwargs)
    return PoisonedAppleEnv(layout, task, **kwargs)


def step(env: GridEnv, state: EnvState, action: int) -> StepOutcome:
    return env.step(state, action)


def unsafety_label(env: GridEnv, state: EnvState, action: int) -> int:
    return env.unsafety_label(state, action)


def safe_action_set(env: GridEnv, state: EnvState) -> np.ndarray:
    return env.safe_action_set(state)


def enumerate_states(env: GridEnv, cap: int = 10**6) -> list[EnvState]:
    """All states reachable from the initial state, terminal ones included.

    Ordering is row-major cell index, then task id, then apple mask.
    """
    start = env.initial_state()
    seen = {start.key(): start}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        if env.is_terminal(s):
            continue
        for nxt in env._transitions(s):
            nxt = EnvState(nxt.cell, nxt.task, nxt.apples)
            if nxt.key() not in seen:
                if len(seen) >= cap:
                    raise StateCapExceeded(f"more than {cap} reachable states")
                seen[nxt.key()] = nxt
                queue.append(nxt)
    return [seen[k] for k in sorted(seen)]


@dataclass(frozen=True)
class SafetyEntry:
    state: np.ndarray
    safe_mask: np.ndarray
    state_key: EnvState


@dataclass(frozen=True)
class SafetyDataset:
    entries: tuple[SafetyEntry, ...]
    env_name: str
    task: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def states(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.array([e.state for e in self.entries]).reshape(len(self.entries), -1)

    @property
    def masks(self) -> np.ndarray:
        return np.array([e.safe_mask for e in self.entries], dtype=bool).reshape(
            len(self.entries), N_ACTIONS
        )

    def to_json(self) -> dict:
        return {
            "env": self.env_name,
            "task": self.task,
            "entries": [
                {
                    "state_key": e.state_key.to_json(),
                    "encoding": [float(v) for v in e.state],
                    "safe_mask": [bool(b) for b in e.safe_mask],
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SafetyDataset":
        entries = tuple(
            SafetyEntry(
                np.asarray(e["encoding"], dtype=float),
                np.asarray(e["safe_mask"], dtype=bool),
                EnvState.from_json(e["state_key"]),
            )
            for e in d["entries"]
        )
        return cls(entries, d["env"], int(d["task"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def build_safety_dataset(env: GridEnv, cap: int = 10**6) -> SafetyDataset:
    """Pair every reachable safety-critical state with its safe-action mask."""
    entries = []
    for s in enumerate_states(env, cap):
        if env.is_terminal(s):
            continue
        mask = env.safe_action_set(s)
        if not mask.any():
            raise SafeActionError(f"state {s.to_json()} has no safe action")
        if mask.all():
            continue
        entries.append(SafetyEntry(env.encode(s), mask, s))
    return SafetyDataset(tuple(entries), env.name, env.task)
