"""Box-pushing gridworld and a synchronous vectorised wrapper."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

GRID = 8
MAX_STEPS = 75
N_BOXES, N_GOALS, N_OBSTACLES = 12, 5, 6
OBS_SHAPE = (5, GRID, GRID)

R_OFF_GRID = -1.0
R_BOX_OFF_GRID = -0.1
R_BLOCKED = -0.1
R_GOAL = 1.0
R_OBSTACLE = -0.2
R_STEP = -0.01

CENTER = [(r, c) for r in range(1, GRID - 1) for c in range(1, GRID - 1)]


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


N_ACTIONS = len(Action)
DELTAS = {Action.UP: (-1, 0), Action.DOWN: (1, 0), Action.LEFT: (0, -1), Action.RIGHT: (0, 1)}

Pos = tuple[int, int]


def on_grid(p: Pos) -> bool:
    return 0 <= p[0] < GRID and 0 <= p[1] < GRID


@dataclass(frozen=True)
class BoardState:
    agent: Pos | None  # None once the agent has walked off the grid
    boxes: frozenset[Pos]
    goals: frozenset[Pos]
    obstacles: frozenset[Pos]
    steps_elapsed: int = 0
    done: bool = False

    def to_ascii(self) -> str:
        rows = []
        for r in range(GRID):
            row = []
            for c in range(GRID):
                p = (r, c)
                if p == self.agent:
                    ch = "A"
                elif p in self.boxes:
                    ch = "B"
                elif p in self.goals:
                    ch = "G"
                elif p in self.obstacles:
                    ch = "O"
                else:
                    ch = "."
                row.append(ch)
            rows.append("".join(row))
        return "\n".join(rows)

    @classmethod
    def from_ascii(cls, text: str, steps_elapsed: int = 0) -> BoardState:
        """Parse an 8x8 board of ``A B G O .`` characters."""
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if len(lines) != GRID or any(len(ln) != GRID for ln in lines):
            raise ValueError(f"board must be {GRID} lines of {GRID} characters")
        agent, boxes, goals, obstacles = None, set(), set(), set()
        for r, ln in enumerate(lines):
            for c, ch in enumerate(ln):
                if ch == "A":
                    if agent is not None:
                        raise ValueError("board has more than one agent")
                    agent = (r, c)
                elif ch == "B":
                    boxes.add((r, c))
                elif ch == "G":
                    goals.add((r, c))
                elif ch == "O":
                    obstacles.add((r, c))
                elif ch != ".":
                    raise ValueError(f"unknown board character {ch!r}")
        if agent is None:
            raise ValueError("board has no agent")
        return cls(agent, frozenset(boxes), frozenset(goals), frozenset(obstacles), steps_elapsed)


def generate_level(rng: int | np.random.Generator) -> BoardState:
    """Sample 24 distinct centre tiles: agent, then boxes, goals, obstacles."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    idx = rng.choice(len(CENTER), 1 + N_BOXES + N_GOALS + N_OBSTACLES, replace=False)
    tiles = [CENTER[i] for i in idx]
    a, b, g = 1, 1 + N_BOXES, 1 + N_BOXES + N_GOALS
    return BoardState(
        agent=tiles[0],
        boxes=frozenset(tiles[a:b]),
        goals=frozenset(tiles[b:g]),
        obstacles=frozenset(tiles[g:]),
    )


def step(state: BoardState, action: int, consumable_goals: bool = False
         ) -> tuple[BoardState, float, bool]:
    """Apply one move; returns (next_state, reward, done)."""
    if state.done:
        raise RuntimeError("step called on a finished episode; reset first")
    dr, dc = DELTAS[Action(action)]
    ar, ac = state.agent
    target = (ar + dr, ac + dc)
    reward = R_STEP
    agent: Pos | None = state.agent
    boxes, goals = state.boxes, state.goals

    if not on_grid(target):
        reward += R_OFF_GRID
        agent = None
    elif target in boxes:
        beyond = (target[0] + dr, target[1] + dc)
        if not on_grid(beyond):
            reward += R_BOX_OFF_GRID
            boxes = boxes - {target}
            agent = target
        elif beyond in boxes:
            reward += R_BLOCKED
        else:
            agent = target
            if beyond in goals:
                reward += R_GOAL
                boxes = boxes - {target}
                if consumable_goals:
                    goals = goals - {beyond}
            else:
                boxes = (boxes - {target}) | {beyond}
                if beyond in state.obstacles:
                    reward += R_OBSTACLE
        if agent == target and target in state.obstacles:
            reward += R_OBSTACLE
    else:
        agent = target
        if target in state.obstacles:
            reward += R_OBSTACLE

    steps = state.steps_elapsed + 1
    done = agent is None or steps >= MAX_STEPS or not boxes
    nxt = replace(state, agent=agent, boxes=boxes, goals=goals, steps_elapsed=steps, done=done)
    return nxt, reward, done


def observe(state: BoardState, dtype=np.float64) -> np.ndarray:
    """5x8x8 tensor: agent, goals, boxes, obstacles, time remaining."""
    obs = np.zeros(OBS_SHAPE, dtype=dtype)
    if state.agent is not None:
        obs[(0,) + state.agent] = 1.0
    for ch, tiles in ((1, state.goals), (2, state.boxes), (3, state.obstacles)):
        for p in tiles:
            obs[(ch,) + p] = 1.0
    obs[4] = (MAX_STEPS - state.steps_elapsed) / MAX_STEPS
    return obs


@dataclass
class BoxWorld:
    """Single environment owning its RNG; levels are drawn from it on reset."""

    rng: np.random.Generator
    consumable_goals: bool = False
    state: BoardState | None = None
    episode_return: float = 0.0
    episode_len: int = 0
    log: list | None = field(default=None, repr=False)

    def reset(self) -> np.ndarray:
        self.state = generate_level(self.rng)
        self.episode_return = 0.0
        self.episode_len = 0
        return observe(self.state)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self.state, reward, done = step(self.state, action, self.consumable_goals)
        self.episode_return += reward
        self.episode_len += 1
        if self.log is not None:
            self.log.append({"step": self.state.steps_elapsed, "action": int(action),
                             "reward": reward, "done": done})
        return observe(self.state), reward, done


@dataclass
class StepBatch:
    obs: np.ndarray  # (n_env, 5, 8, 8), already reset where done
    rewards: np.ndarray  # (n_env,)
    dones: np.ndarray  # (n_env,) bool
    episode_returns: list[float]  # returns of episodes finished this step


class VecEnv:
    """Synchronous batch of independent environments with auto-reset.

    When an episode ends, the returned observation for that slot is already
    the first observation of a fresh level; ``dones`` flags the boundary.
    """

    def __init__(self, rngs: list[np.random.Generator], consumable_goals: bool = False):
        self.envs = [BoxWorld(rng, consumable_goals) for rng in rngs]

    @property
    def n_env(self) -> int:
        return len(self.envs)

    def reset(self) -> np.ndarray:
        return np.stack([e.reset() for e in self.envs])

    def observe(self) -> np.ndarray:
        return np.stack([observe(e.state) for e in self.envs])

    def step(self, actions) -> StepBatch:
        actions = np.asarray(actions)
        if actions.shape != (self.n_env,):
            raise ValueError(f"expected {self.n_env} actions, got shape {actions.shape}")
        obs, rewards, dones, finished = [], [], [], []
        for env, a in zip(self.envs, actions):
            o, r, d = env.step(int(a))
            if d:
                finished.append(env.episode_return)
                o = env.reset()
            obs.append(o)
            rewards.append(r)
            dones.append(d)
        return StepBatch(np.stack(obs), np.asarray(rewards), np.asarray(dones, dtype=bool), finished)

    # resumable state -------------------------------------------------------

    def get_state(self) -> list[dict]:
        out = []
        for e in self.envs:
            s = e.state
            out.append({
                "rng": rng_state(e.rng),
                "agent": list(s.agent) if s.agent is not None else None,
                "boxes": sorted(map(list, s.boxes)),
                "goals": sorted(map(list, s.goals)),
                "obstacles": sorted(map(list, s.obstacles)),
                "steps_elapsed": s.steps_elapsed,
                "done": s.done,
                "episode_return": e.episode_return,
                "episode_len": e.episode_len,
            })
        return out

    def set_state(self, states: list[dict]) -> None:
        if len(states) != self.n_env:
            raise ValueError("env state count mismatch")
        for e, d in zip(self.envs, states):
            e.rng.bit_generator.state = d["rng"]
            e.state = BoardState(
                agent=tuple(d["agent"]) if d["agent"] is not None else None,
                boxes=frozenset(map(tuple, d["boxes"])),
                goals=frozenset(map(tuple, d["goals"])),
                obstacles=frozenset(map(tuple, d["obstacles"])),
                steps_elapsed=d["steps_elapsed"],
                done=d["done"],
            )
            e.episode_return = d["episode_return"]
            e.episode_len = d["episode_len"]


def rng_state(rng: np.random.Generator) -> dict:
    """Bit-generator state with arrays turned into lists (JSON-safe, settable back)."""
    def plain(o):
        if isinstance(o, dict):
            return {k: plain(v) for k, v in o.items()}
        return o.tolist() if isinstance(o, np.ndarray) else o
    return plain(rng.bit_generator.state)


def make_rngs(seed_seq: np.random.SeedSequence, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(s)) for s in seed_seq.spawn(n)]


def vec_reset(n_env: int, seed: int | np.random.SeedSequence,
              consumable_goals: bool = False) -> tuple[VecEnv, np.ndarray]:
    """Build ``n_env`` environments with per-env streams split from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env = VecEnv(make_rngs(ss, n_env), consumable_goals)
    return env, env.reset()


def vec_step(env: VecEnv, actions) -> StepBatch:
    return env.step(actions)


def write_trajectory_log(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
