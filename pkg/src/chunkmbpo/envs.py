"""Toy L-MDP instances and true-environment rollouts."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .lmdp import LMdp

UP, DOWN, LEFT, RIGHT, GRASP, RELEASE = range(6)
ACTION_NAMES = ("up", "down", "left", "right", "grasp", "release")
_MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

# wrist window symbols
EMPTY, OBJECT, BLOCKED, HELD = 0, 1, 2, 3


class TwoViewState(NamedTuple):
    head: int
    wrist: int


@dataclass(frozen=True, eq=False)
class TwoViewGridworld:
    """Pick-and-place gridworld with a global head view and a 3x3 wrist view.

    A state is an (agent cell, object cell, carried) configuration. Releasing
    the object on an instruction's goal cell enters that goal's absorbing
    success state. Head ids coincide with state ids; the wrist id indexes the
    local window pattern around the agent.
    """

    mdp: LMdp
    width: int
    height: int
    goals: tuple
    slip: float
    configs: tuple            # state id -> (agent, obj, carried)
    wrist_of_state: np.ndarray
    wrist_patterns: tuple     # wrist id -> 9-tuple of symbols
    success_states: tuple     # instruction -> state id
    _index: dict = field(repr=False, default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_heads(self) -> int:
        return self.mdp.n_states

    @property
    def n_wrists(self) -> int:
        return len(self.wrist_patterns)

    @property
    def head_of_state(self) -> np.ndarray:
        return np.arange(self.n_states)

    def views(self, state: int) -> TwoViewState:
        return TwoViewState(int(state), int(self.wrist_of_state[state]))

    def state_of(self, head: int, wrist: int) -> int:
        if self.wrist_of_state[head] != wrist:
            raise ValueError(f"wrist {wrist} inconsistent with head {head}")
        return int(head)

    def state_index(self, agent: int, obj: int, carried: bool) -> int:
        return self._index[(agent, obj, bool(carried))]

    def window(self, head: int) -> tuple:
        agent, obj, carried = self.configs[head]
        return wrist_window(self.width, self.height, agent, obj, carried)


def wrist_window(width: int, height: int, agent: int, obj: int,
                 carried: bool) -> tuple:
    """3x3 symbols around the agent, row-major, out-of-grid cells BLOCKED."""
    ax, ay = agent % width, agent // width
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            x, y = ax + dx, ay + dy
            if not (0 <= x < width and 0 <= y < height):
                out.append(BLOCKED)
            elif dx == 0 and dy == 0 and carried:
                out.append(HELD)
            elif y * width + x == obj and not carried:
                out.append(OBJECT)
            else:
                out.append(EMPTY)
    return tuple(out)


def make_twoview_gridworld(width: int, height: int, instructions: Sequence[int],
                           slip: float = 0.1, gamma: float = 0.99) -> TwoViewGridworld:
    """Build the gridworld; each instruction is a goal cell index."""
    n_cells = width * height
    if width < 1 or height < 1 or n_cells > 64:
        raise ValueError("grid must satisfy 1 <= width*height <= 64")
    goals = tuple(int(g) for g in instructions)
    if not goals:
        raise ValueError("instruction list must be non-empty")
    for g in goals:
        if not 0 <= g < n_cells:
            raise ValueError(f"goal cell {g} outside {width}x{height} grid")
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must lie in [0, 1]")

    goal_set = set(goals)
    configs = [(a, o, False) for a in range(n_cells) for o in range(n_cells)
               if o not in goal_set]
    configs += [(a, a, True) for a in range(n_cells)]
    success = {}
    for g in dict.fromkeys(goals):
        success[g] = len(configs)
        configs.append((g, g, False))
    index = {c: i for i, c in enumerate(configs)}
    S = len(configs)

    def move(cell, action):
        x, y = cell % width, cell // width
        dx, dy = _MOVES[action]
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            return ny * width + nx
        return cell

    T = np.zeros((S, 6, S))
    for s, (agent, obj, carried) in enumerate(configs):
        if not carried and obj in goal_set and agent == obj:
            T[s, :, s] = 1.0
            continue
        for a in range(6):
            if a in _MOVES:
                outcomes = [(1.0 - slip, a)] + [(slip / 4, m) for m in _MOVES]
                for p, m in outcomes:
                    if p == 0.0:
                        continue
                    na = move(agent, m)
                    nxt = (na, na, True) if carried else (na, obj, False)
                    T[s, a, index[nxt]] += p
            elif a == GRASP:
                nxt = (agent, agent, True) if (not carried and agent == obj) else (agent, obj, carried)
                T[s, a, index[nxt]] = 1.0
            else:
                nxt = (agent, agent, False) if carried else (agent, obj, carried)
                T[s, a, index[nxt]] = 1.0

    R = np.zeros((S, len(goals)))
    for l, g in enumerate(goals):
        R[success[g], l] = 1.0
    start = np.array([0.0 if (c[2] or c[1] in goal_set) else 1.0 for c in configs])
    start /= start.sum()

    windows = [wrist_window(width, height, *c) for c in configs]
    patterns = tuple(sorted(set(windows)))
    pid = {p: i for i, p in enumerate(patterns)}
    wrist = np.array([pid[w] for w in windows])
    wrist.setflags(write=False)

    mdp = LMdp(T, R, gamma, start, tuple(range(len(goals))))
    return TwoViewGridworld(mdp, width, height, goals, slip, tuple(configs),
                            wrist, patterns,
                            tuple(success[g] for g in goals), index)


@dataclass(frozen=True)
class RandomMdpSpec:
    n_states: int
    n_actions: int
    n_instructions: int = 1
    reward_sparsity: float = 0.2
    dirichlet_alpha: float = 1.0
    seed: int = 0
    gamma: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.reward_sparsity <= 1.0:
            raise ValueError("reward_sparsity must lie in [0, 1]")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if min(self.n_states, self.n_actions, self.n_instructions) < 1:
            raise ValueError("counts must be positive")


def make_random_mdp(spec: RandomMdpSpec) -> LMdp:
    rng = np.random.default_rng(spec.seed)
    S, A = spec.n_states, spec.n_actions
    T = rng.dirichlet(np.full(S, spec.dirichlet_alpha), size=(S, A))
    T /= T.sum(axis=-1, keepdims=True)
    R = (rng.random((S, spec.n_instructions)) < spec.reward_sparsity).astype(float)
    return LMdp(T, R, spec.gamma, np.full(S, 1.0 / S))


# -- rollouts ---------------------------------------------------------------

class ChunkStep(NamedTuple):
    state: int
    chunk: int
    actions: tuple
    rewards: tuple
    next_state: int
    success: bool
    tokens: np.ndarray | None = None


@dataclass
class Trajectory:
    instruction: int
    steps: list
    success: bool = False
    truncated: bool = False
    episode: int = 0

    def discounted_return(self, gamma: float) -> float:
        total, t = 0.0, 0
        for step in self.steps:
            for r in step.rewards:
                total += gamma**t * r
                t += 1
        return total


def sample_row(row: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from a probability row given a uniform ``u``."""
    idx = int(np.searchsorted(np.cumsum(row), u, side="right"))
    return min(idx, len(row) - 1)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def run_episode(mdp: LMdp, policy, instruction: int, max_chunks: int,
                rng: np.random.Generator, start_state: int | None = None,
                stop_on_success: bool = True, episode: int = 0) -> Trajectory:
    """Execute chunk decisions one primitive action at a time."""
    s = sample_row(mdp.start_dist, rng.random()) if start_state is None else int(start_state)
    traj = Trajectory(instruction, [], episode=episode)
    for _ in range(max_chunks):
        dec = policy.act(s, instruction, rng)
        s0, rewards, hit = s, [], False
        for a in dec.actions:
            s = sample_row(mdp.transition[s, a], rng.random())
            r = float(mdp.reward[s, instruction])
            rewards.append(r)
            hit = hit or r == 1.0
        traj.steps.append(ChunkStep(s0, dec.chunk, tuple(int(a) for a in dec.actions),
                                    tuple(rewards), s, hit, dec.tokens))
        if hit:
            traj.success = True
            if stop_on_success:
                return traj
    traj.truncated = not traj.success or not stop_on_success
    return traj


def env_rollout(mdp: LMdp, policy, instruction, n_episodes: int, max_chunks: int,
                seed: int, jobs: int = 1, stop_on_success: bool = True) -> list:
    """Roll a chunk policy in the true environment.

    Episode ``e`` draws from its own generator seeded by ``(seed, e)``, so the
    result does not depend on ``jobs``. ``instruction`` may be a single id or
    a per-episode sequence.
    """
    if np.ndim(instruction) == 0:
        instrs = [int(instruction)] * n_episodes
    else:
        instrs = [int(i) for i in instruction]
        if len(instrs) != n_episodes:
            raise ValueError("per-episode instruction list has wrong length")

    def one(e):
        return run_episode(mdp, policy, instrs[e], max_chunks, episode_rng(seed, e),
                           stop_on_success=stop_on_success, episode=e)

    if jobs <= 1:
        return [one(e) for e in range(n_episodes)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, range(n_episodes)))
