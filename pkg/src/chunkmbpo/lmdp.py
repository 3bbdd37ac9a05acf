"""Finite language-conditioned MDPs and their exact evaluation.

Reward convention: a transition ``s -> s'`` pays ``r(s', l)``, i.e. reward is
read off the arrival state. The value of a policy is therefore

    V(s) = E[ sum_{t>=0} gamma^t r(s_{t+1}, l) | s_0 = s ]

which is the same convention the chunk reward and the GAE residuals use.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

ROW_TOL = 1e-12
CHUNK_ROW_TOL = 1e-10
DIRECT_SOLVE_MAX_STATES = 512
DEFAULT_CHUNK_BUDGET = 2**20

_FORMAT_TAG = "# chunkmbpo lmdp v1"


class CapacityError(ValueError):
    """Raised when a chunk-action space is too large to enumerate."""


class Divergence(NamedTuple):
    value: float
    index: int


def _check_stochastic(rows: np.ndarray, tol: float, what: str) -> None:
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"{what} contains non-finite entries")
    if np.any(rows < 0):
        raise ValueError(f"{what} has negative entries")
    err = np.abs(rows.sum(axis=-1) - 1.0)
    if np.any(err > tol):
        bad = np.unravel_index(np.argmax(err), err.shape)
        raise ValueError(f"{what} row {tuple(int(i) for i in bad)} sums to "
                         f"{rows.sum(axis=-1)[bad]!r}")


@dataclass(frozen=True, eq=False)
class LMdp:
    """Finite language-conditioned MDP.

    ``transition[s, a]`` is the next-state distribution, ``reward[s, l]`` is
    the binary reward for being in ``s`` under instruction ``l``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    start_dist: np.ndarray
    instructions: tuple = ()

    def __post_init__(self):
        T = np.asarray(self.transition, dtype=float)
        R = np.asarray(self.reward, dtype=float)
        d0 = np.asarray(self.start_dist, dtype=float)
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError(f"transition must be (S, A, S), got {T.shape}")
        S = T.shape[0]
        if R.ndim == 1:
            R = R[:, None]
        if R.shape[0] != S:
            raise ValueError(f"reward has {R.shape[0]} states, expected {S}")
        if not np.all((R == 0.0) | (R == 1.0)):
            raise ValueError("rewards must be exactly 0 or 1")
        if d0.shape != (S,):
            raise ValueError("start_dist length must equal n_states")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        _check_stochastic(T, ROW_TOL, "transition")
        _check_stochastic(d0, ROW_TOL, "start_dist")
        instr = tuple(self.instructions) or tuple(range(R.shape[1]))
        if len(instr) != R.shape[1]:
            raise ValueError("instruction list does not match reward columns")
        for name, arr in (("transition", T), ("reward", R), ("start_dist", d0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "instructions", instr)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_instructions(self) -> int:
        return self.reward.shape[1]

    # Shared evaluation surface with ChunkMdp.
    @property
    def kernel(self) -> np.ndarray:
        return self.transition

    @property
    def discount(self) -> float:
        return self.gamma

    def action_reward(self, instruction: int) -> np.ndarray:
        """Expected one-step reward ``E[r(s', l) | s, a]`` as an (S, A) table."""
        return self.transition @ self.reward[:, instruction]

    def with_transition(self, transition: np.ndarray) -> "LMdp":
        return LMdp(transition, self.reward, self.gamma, self.start_dist,
                    self.instructions)


@dataclass(frozen=True, eq=False)
class ChunkMdp:
    """Temporally-extended MDP whose actions are length-``k`` action chunks.

    Chunk ids are base-``n_actions`` numbers with the first primitive action
    as the most significant digit.
    """

    base: LMdp
    k: int
    chunk_transition: np.ndarray
    chunk_reward: np.ndarray
    chunk_gamma: float
    sampled_chunks: np.ndarray | None = field(default=None)

    @property
    def n_states(self) -> int:
        return self.base.n_states

    @property
    def n_actions(self) -> int:
        return self.chunk_transition.shape[1]

    @property
    def kernel(self) -> np.ndarray:
        return self.chunk_transition

    @property
    def discount(self) -> float:
        return self.chunk_gamma

    @property
    def start_dist(self) -> np.ndarray:
        return self.base.start_dist

    @property
    def r_max(self) -> float:
        g = self.base.gamma
        return (1.0 - g**self.k) / (1.0 - g)

    def action_reward(self, instruction: int) -> np.ndarray:
        return self.chunk_reward[:, :, instruction]

    def with_transition(self, chunk_transition: np.ndarray) -> "ChunkMdp":
        _check_stochastic(chunk_transition, CHUNK_ROW_TOL, "chunk_transition")
        return ChunkMdp(self.base, self.k, np.asarray(chunk_transition, float),
                        self.chunk_reward, self.chunk_gamma, self.sampled_chunks)


def chunk_actions(chunk_id, n_actions: int, k: int) -> np.ndarray:
    """Primitive action sequence(s) of a chunk id; trailing axis has length k."""
    ids = np.asarray(chunk_id)
    powers = n_actions ** np.arange(k - 1, -1, -1)
    return (ids[..., None] // powers) % n_actions


def chunk_id(actions: Sequence[int], n_actions: int) -> int:
    cid = 0
    for a in actions:
        cid = cid * n_actions + int(a)
    return cid


def lift_to_chunk_mdp(mdp: LMdp, k: int, budget: int = DEFAULT_CHUNK_BUDGET,
                      chunks: Sequence[int] | None = None) -> ChunkMdp:
    """Lift ``mdp`` to its chunk-level MDP with chunk size ``k``.

    ``chunk_reward[s, c, l] = E[sum_{i=1..k} gamma^(i-1) r(s_i, l)]`` along
    the chunk. If ``chunks`` is given only those chunk ids are kept (a sampled
    chunk dictionary); column ``j`` then refers to ``chunks[j]``.
    """
    if k < 1:
        raise ValueError("chunk size k must be >= 1")
    A, S, g = mdp.n_actions, mdp.n_states, mdp.gamma
    if chunks is None:
        if A**k > budget:
            raise CapacityError(
                f"chunk-action space n_actions^k = {A}^{k} = {A**k} exceeds "
                f"budget {budget}; pass an explicit sampled chunk dictionary")
        # prefix tree: P has shape (A^i, S, S), W has shape (A^i, S, L)
        P = np.broadcast_to(np.eye(S), (1, S, S)).copy()
        W = np.zeros((1, S, mdp.n_instructions))
        T = np.transpose(mdp.transition, (1, 0, 2))  # (A, S, S)
        for i in range(k):
            P = np.einsum("cst,aty->casy", P, T).reshape(-1, S, S)
            W = np.repeat(W, A, axis=0) + g**i * (P @ mdp.reward)
        sampled = None
    else:
        sampled = np.asarray(chunks, dtype=np.int64)
        if sampled.size and (sampled.min() < 0 or sampled.max() >= A**k):
            raise ValueError("sampled chunk id out of range")
        acts = chunk_actions(sampled, A, k)
        P = np.broadcast_to(np.eye(S), (len(sampled), S, S)).copy()
        W = np.zeros((len(sampled), S, mdp.n_instructions))
        for i in range(k):
            P = P @ np.transpose(mdp.transition[:, acts[:, i], :], (1, 0, 2))
            W = W + g**i * (P @ mdp.reward)
    chunk_T = np.ascontiguousarray(np.transpose(P, (1, 0, 2)))
    chunk_R = np.ascontiguousarray(np.transpose(W, (1, 0, 2)))
    _check_stochastic(chunk_T, CHUNK_ROW_TOL, "chunk_transition")
    return ChunkMdp(mdp, k, chunk_T, chunk_R, g**k, sampled)


def _check_policy(mdp, policy: np.ndarray) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match "
                         f"({mdp.n_states}, {mdp.n_actions})")
    _check_stochastic(pi, CHUNK_ROW_TOL, "policy")
    return pi


def policy_kernel(mdp, policy: np.ndarray) -> np.ndarray:
    """State-to-state kernel ``P_pi[s, s']`` induced by a policy table."""
    return np.einsum("sa,sat->st", policy, mdp.kernel)


def exact_value(mdp, policy: np.ndarray, instruction: int = 0) -> np.ndarray:
    """Exact policy evaluation on an :class:`LMdp` or :class:`ChunkMdp`.

    Direct linear solve up to 512 states, value iteration beyond. Raises
    ``np.linalg.LinAlgError`` if the evaluation system is singular.
    """
    pi = _check_policy(mdp, policy)
    P = policy_kernel(mdp, pi)
    r = np.einsum("sa,sa->s", pi, mdp.action_reward(instruction))
    g = mdp.discount
    S = mdp.n_states
    if S <= DIRECT_SOLVE_MAX_STATES:
        V = np.linalg.solve(np.eye(S) - g * P, r)
    else:
        V = np.zeros(S)
        while True:
            V_new = r + g * (P @ V)
            if np.max(np.abs(V_new - V)) <= 1e-10 * (1.0 - g):
                V = V_new
                break
            V = V_new
    residual = np.max(np.abs(r + g * (P @ V) - V), initial=0.0)
    if not np.isfinite(residual) or residual > 1e-10 * max(1.0, np.max(np.abs(V))):
        raise np.linalg.LinAlgError(
            f"policy evaluation residual {residual:.3e} exceeds tolerance")
    return V


def expected_return(mdp, policy: np.ndarray, instruction: int = 0,
                    start: np.ndarray | None = None) -> float:
    d0 = mdp.start_dist if start is None else start
    return float(d0 @ exact_value(mdp, policy, instruction))


@dataclass(frozen=True)
class DistributionPair:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
        _check_stochastic(p, ROW_TOL, "p")
        _check_stochastic(q, ROW_TOL, "q")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def tv(self) -> float:
        return tv_distance(self.p, self.q)


def tv_distance(p, q=None) -> float:
    """Total variation distance ``0.5 * sum |p - q|``.

    Accepts either two vectors or a single :class:`DistributionPair`.
    """
    if q is None:
        if not isinstance(p, DistributionPair):
            raise TypeError("pass two vectors or a DistributionPair")
        p, q = p.p, p.q
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def tv_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Row-wise TV over the trailing axis."""
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    return 0.5 * np.abs(P - Q).sum(axis=-1)


@dataclass(frozen=True)
class VisitationProfile:
    """Exact per-step state (or state-action) distributions.

    Entries of ``per_step`` are either length-S state vectors or (S, A)
    state-action joints.
    """

    per_step: tuple
    policy_id: str = ""
    start_source: str = "env-start"

    @property
    def horizon(self) -> int:
        return len(self.per_step) - 1


def visitation_profile(mdp, policy: np.ndarray, start: str = "env-start",
                       horizon: int = 0, start_dist: np.ndarray | None = None,
                       policy_id: str = "") -> VisitationProfile:
    """Push the start distribution through the policy kernel ``horizon`` times."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if start == "env-start":
        d = np.asarray(mdp.start_dist if start_dist is None else start_dist, float)
    elif start == "buffer-states":
        if start_dist is None:
            raise ValueError("buffer-states start requires start_dist")
        d = np.asarray(start_dist, float)
    else:
        raise ValueError(f"unknown start source {start!r}")
    _check_stochastic(d, CHUNK_ROW_TOL, "start distribution")
    P = policy_kernel(mdp, _check_policy(mdp, policy))
    steps = [d]
    for _ in range(horizon):
        d = d @ P
        steps.append(d)
    return VisitationProfile(tuple(steps), policy_id, start)


def policy_divergence(pi_a: np.ndarray, pi_b: np.ndarray) -> Divergence:
    """Max over states of the TV between chunk-action distributions."""
    a = np.asarray(pi_a, float)
    b = np.asarray(pi_b, float)
    if a.shape != b.shape:
        raise ValueError(f"mismatched action sets: {a.shape} vs {b.shape}")
    per_state = tv_rows(a, b)
    i = int(np.argmax(per_state))
    return Divergence(float(per_state[i]), i)


def model_divergence(true_kernel: np.ndarray, learned_kernel: np.ndarray,
                     profile: VisitationProfile, policy: np.ndarray | None = None,
                     action_mode: str = "policy") -> Divergence:
    """Max over profile steps of the expected next-state TV.

    For state-vector profile entries the action marginal comes from
    ``policy`` (``action_mode="policy"``) or the worst action is taken per
    state (``action_mode="max"``). State-action joint entries are used as-is.
    The returned index is the maximizing profile step.
    """
    T = getattr(true_kernel, "kernel", true_kernel)
    Th = getattr(learned_kernel, "kernel", learned_kernel)
    tv = tv_rows(np.asarray(T, float), np.asarray(Th, float))  # (S, A)
    per_t = []
    for d in profile.per_step:
        d = np.asarray(d, float)
        if d.shape[0] != tv.shape[0]:
            raise ValueError("profile/model state-space mismatch")
        if d.ndim == 2:
            per_t.append(float(np.sum(d * tv)))
        elif action_mode == "max":
            per_t.append(float(d @ tv.max(axis=1)))
        elif action_mode == "policy":
            if policy is None:
                raise ValueError("policy action mode needs a policy table")
            per_t.append(float(d @ np.einsum("sa,sa->s", policy, tv)))
        else:
            raise ValueError(f"unknown action_mode {action_mode!r}")
    i = int(np.argmax(per_t))
    return Divergence(per_t[i], i)


# -- serialization ----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_lmdp(mdp: LMdp, path) -> None:
    S, A, L = mdp.n_states, mdp.n_actions, mdp.n_instructions
    out = io.StringIO()
    out.write(_FORMAT_TAG + "\n")
    out.write(f"states {S}\nactions {A}\n")
    out.write("instructions " + " ".join(str(i) for i in mdp.instructions) + "\n")
    out.write(f"gamma {_fmt(mdp.gamma)}\n")
    out.write("start " + " ".join(_fmt(x) for x in mdp.start_dist) + "\n")
    out.write("[transition]\n")
    for s in range(S):
        for a in range(A):
            out.write(" ".join(_fmt(x) for x in mdp.transition[s, a]) + "\n")
    out.write("[reward]\n")
    for s in range(S):
        out.write(" ".join(str(int(x)) for x in mdp.reward[s]) + "\n")
    Path(path).write_text(out.getvalue())


def load_lmdp(path) -> LMdp:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _FORMAT_TAG:
        raise ValueError(f"{path}: not an lmdp file (bad header)")
    head = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("["):
        key, _, rest = lines[i].partition(" ")
        head[key] = rest
        i += 1
    try:
        S, A = int(head["states"]), int(head["actions"])
        instr = tuple(int(x) for x in head["instructions"].split())
        gamma = float(head["gamma"])
        start = np.array([float(x) for x in head["start"].split()])
    except KeyError as exc:
        raise ValueError(f"{path}: missing header line {exc}") from None
    if lines[i:i + 1] != ["[transition]"]:
        raise ValueError(f"{path}: expected [transition] at line {i + 1}")
    rows = lines[i + 1:i + 1 + S * A]
    T = np.array([[float(x) for x in r.split()] for r in rows]).reshape(S, A, S)
    j = i + 1 + S * A
    if lines[j:j + 1] != ["[reward]"]:
        raise ValueError(f"{path}: expected [reward] at line {j + 1}")
    R = np.array([[float(x) for x in r.split()] for r in lines[j + 1:j + 1 + S]])
    if R.shape != (S, len(instr)):
        raise ValueError(f"{path}: truncated reward block")
    return LMdp(T, R, gamma, start, instr)
