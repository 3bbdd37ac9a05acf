"""Count-based chunk-level world model with optional head/wrist factorization."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_BINS = 256
_CKPT_TAG = "# chunkmbpo world-model v1"


# -- action tokens ----------------------------------------------------------

def tokenize_action(values, lo: float = -1.0, hi: float = 1.0,
                    bins: int = DEFAULT_BINS) -> np.ndarray:
    """Uniformly bin reals in ``[lo, hi]`` into integer tokens ``[0, bins)``."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite action value")
    v = np.clip(v, lo, hi)
    tok = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(tok, bins - 1)


def detokenize_action(tokens, lo: float = -1.0, hi: float = 1.0,
                      bins: int = DEFAULT_BINS) -> np.ndarray:
    """Centre-of-bin values for integer tokens."""
    t = np.asarray(tokens)
    if np.any(t < 0) or np.any(t >= bins):
        raise ValueError(f"token out of range [0, {bins})")
    return lo + (t + 0.5) * (hi - lo) / bins


@dataclass(frozen=True, eq=False)
class ActionChunk:
    """A k x d grid of action tokens in ``[0, bins)``."""

    tokens: np.ndarray
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64)
        if t.ndim == 1:
            t = t[:, None]
        if t.ndim != 2:
            raise ValueError("tokens must be a k x d grid")
        if np.any(t < 0) or np.any(t >= self.bins):
            raise ValueError(f"token out of range [0, {self.bins})")
        t.setflags(write=False)
        object.__setattr__(self, "tokens", t)

    @property
    def k(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @property
    def chunk_id(self) -> int:
        """Exact mixed-radix id of the whole token grid (row-major)."""
        cid = 0
        for tok in self.tokens.ravel():
            cid = cid * self.bins + int(tok)
        return cid

    def primitive_actions(self) -> np.ndarray:
        """Per-step action ids, reading each row's d tokens as base-``bins`` digits."""
        powers = self.bins ** np.arange(self.d - 1, -1, -1)
        return self.tokens @ powers

    def __eq__(self, other):
        return (isinstance(other, ActionChunk) and self.bins == other.bins
                and np.array_equal(self.tokens, other.tokens))

    def __hash__(self):
        return hash((self.bins, self.tokens.tobytes(), self.tokens.shape))

    @classmethod
    def from_id(cls, chunk_id: int, k: int, d: int = 1, bins: int = DEFAULT_BINS):
        digits = []
        for _ in range(k * d):
            chunk_id, r = divmod(int(chunk_id), bins)
            digits.append(r)
        return cls(np.array(digits[::-1]).reshape(k, d), bins)


def chunk_reward_label(rewards, gamma: float) -> float:
    return float(sum(gamma**i * r for i, r in enumerate(rewards)))


# -- model ------------------------------------------------------------------

@dataclass(eq=False)
class ChunkWorldModel:
    """Learned chunk transition and chunk reward tables.

    ``transition_est[s, c]`` is the predicted successor distribution,
    ``reward_est[s, c, l]`` the predicted within-chunk discounted reward.
    ``support[s, c]`` marks pairs seen in data; other rows are uniform
    fallbacks (unless the model was built from an explicit kernel).
    In ``interleaved`` mode ``head_counts`` and ``wrist_counts`` hold the two
    conditional count tables; in ``flat`` mode with views, ``wrist_counts``
    is keyed by ``(head, wrist, chunk)`` instead of ``(wrist, next_head)``.
    """

    transition_est: np.ndarray
    reward_est: np.ndarray
    k: int
    gamma: float
    smoothing_alpha: float = 0.1
    view_mode: str = "flat"
    support: np.ndarray | None = None
    counts: np.ndarray | None = None
    next_reward: np.ndarray | None = None
    success_mask: np.ndarray | None = None
    wrist_of_state: np.ndarray | None = None
    n_wrists: int = 0
    head_counts: dict = field(default_factory=dict)
    wrist_counts: dict = field(default_factory=dict)
    start_states: np.ndarray | None = None

    def __post_init__(self):
        S, C, _ = self.transition_est.shape
        if self.support is None:
            self.support = np.ones((S, C), dtype=bool)
        if self.counts is None:
            self.counts = np.zeros((S, C), dtype=np.int64)
        L = self.reward_est.shape[2]
        if self.next_reward is None:
            self.next_reward = np.zeros((S, L))
        if self.success_mask is None:
            self.success_mask = np.zeros((S, L), dtype=bool)
        if self.view_mode not in ("flat", "interleaved"):
            raise ValueError(f"unknown view_mode {self.view_mode!r}")

    @property
    def n_states(self) -> int:
        return self.transition_est.shape[0]

    @property
    def n_chunks(self) -> int:
        return self.transition_est.shape[1]

    @property
    def n_instructions(self) -> int:
        return self.reward_est.shape[2]

    @property
    def kernel(self) -> np.ndarray:
        return self.transition_est

    @property
    def r_max(self) -> float:
        return (1.0 - self.gamma**self.k) / (1.0 - self.gamma)

    def support_pairs(self) -> set:
        return {(int(s), int(c)) for s, c in zip(*np.nonzero(self.support))}

    # per-view conditionals
    def head_est(self, head: int, wrist: int, chunk: int) -> np.ndarray:
        return self._smoothed(self.head_counts.get((head, wrist, chunk)),
                              self.n_states, (head, wrist, chunk))

    def wrist_est(self, wrist: int, next_head: int) -> np.ndarray:
        if self.view_mode != "interleaved":
            raise ValueError("wrist_est(wrist, next_head) needs interleaved mode")
        return self._smoothed(self.wrist_counts.get((wrist, next_head)),
                              self.n_wrists, (wrist, next_head))

    def wrist_flat(self, head: int, wrist: int, chunk: int) -> np.ndarray:
        if self.view_mode != "flat":
            raise ValueError("wrist_flat needs flat mode")
        return self._smoothed(self.wrist_counts.get((head, wrist, chunk)),
                              self.n_wrists, (head, wrist, chunk))

    def _smoothed(self, counts, size, key):
        if counts is None:
            if self.smoothing_alpha <= 0:
                raise KeyError(f"conditioning {key} outside support with smoothing disabled")
            return np.full(size, 1.0 / size)
        a = self.smoothing_alpha
        return (counts + a) / (counts.sum() + a * size)

    def view_joint(self, state: int, chunk: int) -> np.ndarray:
        """Implied joint over (next head, next wrist) as an (H, W) table."""
        h, w = state, int(self.wrist_of_state[state])
        head = self.head_est(h, w, chunk)
        if self.view_mode == "interleaved":
            wr = np.stack([self.wrist_est(w, hn) for hn in range(self.n_states)])
            return head[:, None] * wr
        return np.outer(head, self.wrist_flat(h, w, chunk))


def model_from_kernel(chunk_transition, chunk_reward, k: int, gamma: float,
                      success_mask=None) -> ChunkWorldModel:
    """Wrap explicit chunk tables (an oracle or corrupted model)."""
    T = np.array(chunk_transition, dtype=float)
    R = np.array(chunk_reward, dtype=float)
    if R.ndim == 2:
        R = R[:, :, None]
    return ChunkWorldModel(T, R, k, gamma, smoothing_alpha=0.0,
                           success_mask=None if success_mask is None else np.array(success_mask, bool))


def oracle_model(chunk_mdp, success_states=None) -> ChunkWorldModel:
    mask = None
    if success_states is not None:
        mask = np.zeros((chunk_mdp.n_states, chunk_mdp.chunk_reward.shape[2]), bool)
        for l, s in enumerate(success_states):
            mask[s, l] = True
    return model_from_kernel(chunk_mdp.chunk_transition, chunk_mdp.chunk_reward,
                             chunk_mdp.k, chunk_mdp.base.gamma, mask)


def corrupt_model(model: ChunkWorldModel, eta: float, adversarial: np.ndarray,
                  mask: np.ndarray | None = None) -> ChunkWorldModel:
    """Mix rows with adversarial rows: ``(1 - eta) * T + eta * adv`` where ``mask``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    T = model.transition_est.copy()
    adv = np.broadcast_to(adversarial, T.shape)
    m = np.ones(T.shape[:2], bool) if mask is None else np.asarray(mask, bool)
    T[m] = (1.0 - eta) * T[m] + eta * adv[m]
    out = ChunkWorldModel(T, model.reward_est.copy(), model.k, model.gamma,
                          model.smoothing_alpha, model.view_mode, model.support.copy(),
                          model.counts.copy(), model.next_reward.copy(),
                          model.success_mask.copy(), model.wrist_of_state, model.n_wrists,
                          dict(model.head_counts), dict(model.wrist_counts),
                          model.start_states)
    return out


def fit_chunk_model(buffer, k: int, n_states: int, n_chunks: int,
                    smoothing_alpha: float = 0.1, view_mode: str = "flat",
                    n_instructions: int | None = None, gamma: float = 0.99,
                    wrist_of_state=None) -> ChunkWorldModel:
    """Fit transition and reward estimators from replay-buffer entries.

    Supported rows are ``(count + alpha) / (total + alpha * n_states)``,
    unseen pairs are uniform and left out of ``support``. Reward estimates
    are sample means of the within-chunk discounted reward labels; pairs
    never seen under an instruction fall back to the expected arrival-state
    reward ``sum_s' T(s'|s,c) r_next(s', l)``.
    """
    entries = list(getattr(buffer, "entries", buffer))
    if not entries:
        raise ValueError("cannot fit a world model on an empty buffer")
    if view_mode not in ("flat", "interleaved"):
        raise ValueError(f"unknown view_mode {view_mode!r}")
    if view_mode == "interleaved" and wrist_of_state is None:
        raise ValueError("interleaved mode needs the wrist view map")
    L = n_instructions or (1 + max(e.instruction for e in entries))
    S, C = n_states, n_chunks

    counts = np.zeros((S, C, S))
    r_sum = np.zeros((S, C, L))
    r_cnt = np.zeros((S, C, L))
    nr_sum = np.zeros((S, L))
    nr_cnt = np.zeros((S, L))
    success = np.zeros((S, L), dtype=bool)
    starts = []
    head_counts, wrist_counts = {}, {}
    W = 0 if wrist_of_state is None else int(np.max(wrist_of_state)) + 1

    for e in entries:
        if e.chunk.k != k:
            raise ValueError(f"chunk misalignment: entry has k={e.chunk.k}, model k={k}")
        c = e.chunk_id
        if not 0 <= c < C:
            raise ValueError(f"chunk id {c} outside model range {C}")
        s, sn, l = e.state, e.next_state, e.instruction
        counts[s, c, sn] += 1
        if e.chunk_index == 0:
            starts.append(s)
        if len(e.rewards) == k:
            lab = chunk_reward_label(e.rewards, gamma)
            r_sum[s, c, l] += lab
            r_cnt[s, c, l] += 1
            nr_sum[sn, l] += lab
            nr_cnt[sn, l] += 1
            if e.rewards[-1] == 1:
                success[sn, l] = True
        if wrist_of_state is not None:
            w, wn = int(wrist_of_state[s]), int(wrist_of_state[sn])
            head_counts.setdefault((s, w, c), np.zeros(S))[sn] += 1
            key = (w, sn) if view_mode == "interleaved" else (s, w, c)
            wrist_counts.setdefault(key, np.zeros(W))[wn] += 1

    n_obs = counts.sum(axis=2)
    support = n_obs > 0
    T = np.full((S, C, S), 1.0 / S)
    a = smoothing_alpha
    T[support] = (counts[support] + a) / (n_obs[support][:, None] + a * S)
    next_reward = np.divide(nr_sum, nr_cnt, out=np.zeros_like(nr_sum), where=nr_cnt > 0)
    R = T @ next_reward
    seen = r_cnt > 0
    R[seen] = r_sum[seen] / r_cnt[seen]
    return ChunkWorldModel(T, R, k, gamma, smoothing_alpha, view_mode, support,
                           n_obs.astype(np.int64), next_reward, success,
                           None if wrist_of_state is None else np.asarray(wrist_of_state),
                           W, head_counts, wrist_counts,
                           np.array(sorted(starts), dtype=np.int64))


def wrist_successor_tv(model: ChunkWorldModel, true_kernel: np.ndarray,
                       wrist_of_state: np.ndarray) -> float:
    """Mean TV between the model's next-wrist law and the true next wrist.

    Averaged uniformly over supported (state, chunk) pairs and, within a
    pair, over the true next head. Given the next head the true wrist is
    deterministic, so the reference is a point mass. Interleaved models
    condition on the sampled next head; flat models cannot.
    """
    pairs = sorted(model.support_pairs())
    if not pairs:
        raise ValueError("model has empty support")
    W = model.n_wrists
    total = 0.0
    for s, c in pairs:
        w = int(wrist_of_state[s])
        p_next = true_kernel[s, c]
        flat = model.wrist_flat(s, w, c) if model.view_mode == "flat" else None
        acc = 0.0
        for hn in np.nonzero(p_next)[0]:
            law = model.wrist_est(w, int(hn)) if flat is None else flat
            truth = np.zeros(W)
            truth[wrist_of_state[hn]] = 1.0
            acc += p_next[hn] * 0.5 * np.abs(law - truth).sum()
        total += acc
    return total / len(pairs)


def predict_interleaved(model: ChunkWorldModel, s_h: int, s_w: int, chunk,
                        rng) -> tuple:
    """Sample the next head view, then the next wrist view given it."""
    if model.view_mode != "interleaved":
        raise ValueError("predict_interleaved needs an interleaved model")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    c = chunk.chunk_id if isinstance(chunk, ActionChunk) else int(chunk)
    head = model.head_est(s_h, s_w, c)
    h_next = int(rng.choice(len(head), p=head))
    wrist = model.wrist_est(s_w, h_next)
    w_next = int(rng.choice(len(wrist), p=wrist))
    return h_next, w_next


def predict_reward(model: ChunkWorldModel, state: int | None, chunk,
                   instruction: int, next_state: int | None = None) -> float:
    """Chunk reward estimate for ``(state, chunk)`` under ``instruction``.

    With ``state=None`` the arrival-state estimator ``r(s_next, l)`` is used.
    """
    if not 0 <= instruction < model.n_instructions:
        raise ValueError(f"unknown instruction {instruction}")
    if state is None:
        if next_state is None:
            raise ValueError("need a state or a next_state")
        return float(model.next_reward[next_state, instruction])
    c = chunk.chunk_id if isinstance(chunk, ActionChunk) else int(chunk)
    return float(model.reward_est[state, c, instruction])


# -- checkpoint -------------------------------------------------------------

def _f(x) -> str:
    return format(float(x), ".17g")


def save_model(model: ChunkWorldModel, path) -> None:
    S, C, L = model.n_states, model.n_chunks, model.n_instructions
    out = io.StringIO()
    out.write(_CKPT_TAG + "\n[meta]\n")
    out.write(f"states = {S}\nchunks = {C}\ninstructions = {L}\nk = {model.k}\n")
    out.write(f"gamma = {_f(model.gamma)}\nsmoothing_alpha = {_f(model.smoothing_alpha)}\n")
    out.write(f"view_mode = {model.view_mode}\nn_wrists = {model.n_wrists}\n")
    if model.wrist_of_state is not None:
        out.write("wrist_of_state = " + " ".join(str(int(w)) for w in model.wrist_of_state) + "\n")
    if model.start_states is not None:
        out.write("start_states = " + " ".join(str(int(s)) for s in model.start_states) + "\n")
    out.write("[support]\n")
    for s, c in zip(*np.nonzero(model.support)):
        out.write(f"{s} {c} {int(model.counts[s, c])}\n")
    out.write("[transition]\n")
    for s in range(S):
        for c in range(C):
            out.write(" ".join(_f(x) for x in model.transition_est[s, c]) + "\n")
    out.write("[reward]\n")
    for s in range(S):
        for c in range(C):
            out.write(" ".join(_f(x) for x in model.reward_est[s, c]) + "\n")
    out.write("[next_reward]\n")
    for s in range(S):
        out.write(" ".join(_f(x) for x in model.next_reward[s]) + " | "
                  + " ".join(str(int(b)) for b in model.success_mask[s]) + "\n")
    for name, table in (("head_counts", model.head_counts), ("wrist_counts", model.wrist_counts)):
        out.write(f"[{name}]\n")
        for key in sorted(table):
            out.write(" ".join(map(str, key)) + " : "
                      + " ".join(_f(x) for x in table[key]) + "\n")
    Path(path).write_text(out.getvalue())


def load_model(path) -> ChunkWorldModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _CKPT_TAG:
        raise ValueError(f"{path}: not a world-model checkpoint")
    sections, cur = {}, None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1]
            sections[cur] = []
        elif cur is None:
            raise ValueError(f"{path}: content before first section")
        else:
            sections[cur].append(line)
    meta = dict(l.split(" = ", 1) for l in sections["meta"])
    S, C, L = int(meta["states"]), int(meta["chunks"]), int(meta["instructions"])
    support = np.zeros((S, C), bool)
    counts = np.zeros((S, C), np.int64)
    for line in sections["support"]:
        s, c, n = map(int, line.split())
        support[s, c] = True
        counts[s, c] = n
    T = np.array([[float(x) for x in l.split()] for l in sections["transition"]]).reshape(S, C, S)
    R = np.array([[float(x) for x in l.split()] for l in sections["reward"]]).reshape(S, C, L)
    nr, sm = [], []
    for line in sections["next_reward"]:
        a, b = line.split(" | ")
        nr.append([float(x) for x in a.split()])
        sm.append([bool(int(x)) for x in b.split()])

    def table(name):
        out = {}
        for line in sections.get(name, []):
            key, vals = line.split(" : ")
            out[tuple(int(x) for x in key.split())] = np.array([float(x) for x in vals.split()])
        return out

    wos = meta.get("wrist_of_state")
    starts = meta.get("start_states")
    return ChunkWorldModel(
        T, R, int(meta["k"]), float(meta["gamma"]), float(meta["smoothing_alpha"]),
        meta["view_mode"], support, counts, np.array(nr), np.array(sm, bool),
        None if wos is None else np.array([int(x) for x in wos.split()]),
        int(meta["n_wrists"]), table("head_counts"), table("wrist_counts"),
        None if starts is None else np.array([int(x) for x in starts.split()], np.int64))
