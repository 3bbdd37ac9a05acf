"""Replay buffer, chunk-level branched rollouts, chunk GAE, clipped-surrogate
updates and the collect / fit / optimize-in-model loop."""

from __future__ import annotations

import csv
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .envs import env_rollout
from .lmdp import LMdp, expected_return, lift_to_chunk_mdp
from .policy import FlowNoisePolicy, SoftmaxChunkPolicy, ValueHead, save_policy
from .world_model import (ActionChunk, ChunkWorldModel, corrupt_model, fit_chunk_model,
                          oracle_model, save_model)


# -- replay buffer ----------------------------------------------------------

class BufferEntry(NamedTuple):
    state: int
    instruction: int
    chunk: ActionChunk
    rewards: tuple
    next_state: int
    success: bool
    episode: int
    chunk_index: int

    @property
    def chunk_id(self) -> int:
        return self.chunk.chunk_id


@dataclass
class ReplayBuffer:
    k: int = 1
    d: int = 1
    bins: int = 256
    capacity: int = 1_000_000
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def add(self, entry: BufferEntry) -> None:
        if any(r not in (0, 1) for r in entry.rewards):
            raise ValueError("per-step rewards must be 0 or 1")
        if len(entry.rewards) > self.k:
            raise ValueError("more rewards than chunk steps")
        if entry.chunk.tokens.shape != (self.k, self.d) or entry.chunk.bins != self.bins:
            raise ValueError("chunk shape does not match the buffer")
        if self.entries:
            prev = self.entries[-1]
            if prev.episode == entry.episode and prev.next_state != entry.state:
                raise ValueError(f"episode {entry.episode} is not threaded at chunk "
                                 f"{entry.chunk_index}")
        self.entries.append(entry)
        if len(self.entries) > self.capacity:
            del self.entries[0]

    def add_trajectory(self, traj) -> None:
        for i, st in enumerate(traj.steps):
            tokens = st.tokens if st.tokens is not None else np.asarray(st.actions)[:, None]
            self.add(BufferEntry(int(st.state), int(traj.instruction),
                                 ActionChunk(np.asarray(tokens).reshape(self.k, self.d), self.bins),
                                 tuple(int(r) for r in st.rewards), int(st.next_state),
                                 bool(st.success), int(traj.episode), i))

    @property
    def episodes(self) -> list:
        return sorted({e.episode for e in self.entries})

    def states(self) -> np.ndarray:
        return np.array([e.state for e in self.entries], dtype=np.int64)


_MAGIC = b"CMBPOBUF"
_VERSION = 1
# magic, version, k, d, bins, capacity, count
_HEADER = struct.Struct("<8sHHHIQQ")


def _record_struct(k, d):
    # state, instruction, next_state, episode, chunk_index, success, n_rewards,
    # rewards[k], tokens[k*d]
    return struct.Struct(f"<iiiiiBB{k}B{k * d}i")


class BufferFormatError(ValueError):
    pass


def save_buffer(buffer: ReplayBuffer, path) -> None:
    rec = _record_struct(buffer.k, buffer.d)
    header = _HEADER.pack(_MAGIC, _VERSION, buffer.k, buffer.d, buffer.bins,
                          buffer.capacity, len(buffer.entries))
    body = bytearray()
    for e in buffer.entries:
        rw = list(e.rewards) + [0] * (buffer.k - len(e.rewards))
        body += rec.pack(e.state, e.instruction, e.next_state, e.episode, e.chunk_index,
                         int(e.success), len(e.rewards), *rw, *e.chunk.tokens.ravel().tolist())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", zlib.crc32(header)))
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(bytes(body))))


def load_buffer(path) -> ReplayBuffer:
    raw = Path(path).read_bytes()
    hs = _HEADER.size
    if len(raw) < hs + 4:
        raise BufferFormatError(f"{path}: truncated header ({len(raw)} bytes, need {hs + 4})")
    magic, version, k, d, bins, capacity, count = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        bad = next(i for i in range(8) if raw[i] != _MAGIC[i])
        raise BufferFormatError(f"{path}: bad magic byte at offset {bad}")
    if version != _VERSION:
        raise BufferFormatError(f"{path}: version {version} at offset 8, expected {_VERSION}")
    (crc,) = struct.unpack_from("<I", raw, hs)
    if crc != zlib.crc32(raw[:hs]):
        raise BufferFormatError(f"{path}: header checksum mismatch over offsets 0-{hs - 1} "
                                f"(stored at offset {hs})")
    rec = _record_struct(k, d)
    body_start = hs + 4
    expected = body_start + count * rec.size + 4
    if len(raw) != expected:
        raise BufferFormatError(f"{path}: expected {expected} bytes for {count} records, "
                                f"found {len(raw)} (truncated or padded at offset "
                                f"{min(len(raw), expected)})")
    body = raw[body_start:body_start + count * rec.size]
    (bcrc,) = struct.unpack_from("<I", raw, body_start + count * rec.size)
    if bcrc != zlib.crc32(body):
        raise BufferFormatError(f"{path}: record checksum mismatch over offsets "
                                f"{body_start}-{body_start + len(body) - 1}")
    buf = ReplayBuffer(k, d, bins, capacity)
    for i in range(count):
        off = body_start + i * rec.size
        vals = rec.unpack_from(raw, off)
        s, l, sn, ep, ci, succ, nr = vals[:7]
        rewards = tuple(vals[7:7 + nr])
        tokens = np.array(vals[7 + k:], dtype=np.int64).reshape(k, d)
        try:
            buf.add(BufferEntry(s, l, ActionChunk(tokens, bins), rewards, sn, bool(succ), ep, ci))
        except ValueError as exc:
            raise BufferFormatError(f"{path}: invalid record at offset {off}: {exc}") from exc
    return buf


def buffer_io(buffer_or_none, path, direction: str):
    """``direction="save"`` writes ``buffer``; ``"load"`` returns a buffer."""
    if direction == "save":
        save_buffer(buffer_or_none, path)
        return path
    if direction == "load":
        return load_buffer(path)
    raise ValueError(f"unknown direction {direction!r}")


# -- rollout plans and configs ---------------------------------------------

@dataclass(frozen=True)
class RolloutPlan:
    """``scheme`` is ``branched`` (n chunks from buffer states) or ``full``
    (``max_chunks`` chunks from buffer episode starts)."""

    scheme: str = "branched"
    n: int = 2
    max_chunks: int = 20
    starts_per_batch: int = 256

    def __post_init__(self):
        if self.scheme not in ("branched", "full"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.horizon < 1 or self.starts_per_batch < 1:
            raise ValueError("need n >= 1 (or max_chunks >= 1) and M >= 1")

    @property
    def horizon(self) -> int:
        return self.n if self.scheme == "branched" else self.max_chunks

    @classmethod
    def for_sample_size(cls, scheme, n, max_chunks, sample_size):
        horizon = n if scheme == "branched" else max_chunks
        return cls(scheme, n, max_chunks, max(1, sample_size // horizon))


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95
    k: int = 1
    clip_epsilon: float = 0.1
    updates_per_batch: int = 20
    advantage_normalization: str = "per-batch"

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.k < 1 or self.updates_per_batch < 1:
            raise ValueError("k and updates_per_batch must be positive")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.advantage_normalization not in ("off", "per-batch"):
            raise ValueError("advantage_normalization must be 'off' or 'per-batch'")

    @property
    def chunk_gamma(self) -> float:
        return self.gamma**self.k


@dataclass
class SyntheticBatch:
    """Padded (M, horizon) arrays; ``lengths[m]`` valid tuples per segment."""

    states: np.ndarray
    instructions: np.ndarray
    chunks: np.ndarray
    old_logp: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    lengths: np.ndarray
    bootstrap: np.ndarray
    chains: np.ndarray | None = None
    provenance: str = "world-model"

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.states.shape[1])[None, :] < self.lengths[:, None]

    @property
    def n_tuples(self) -> int:
        return int(self.lengths.sum())

    def segments(self) -> list:
        out = []
        for m in range(len(self.lengths)):
            seg = []
            for t in range(self.lengths[m]):
                chain = None if self.chains is None else self.chains[m, t]
                seg.append((int(self.states[m, t]), int(self.chunks[m, t]), chain,
                            float(self.old_logp[m, t]), float(self.rewards[m, t]),
                            int(self.next_states[m, t])))
            out.append(seg)
        return out


def absorbing_value(gamma: float, k: int) -> float:
    """Value of an absorbing reward-1 state: ``r_max_chunk / (1 - gamma^k)``."""
    return ((1.0 - gamma**k) / (1.0 - gamma)) / (1.0 - gamma**k)


def _sample_rows(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(rows, axis=-1)
    return np.minimum((cdf <= u[:, None]).sum(axis=-1), rows.shape[-1] - 1)


def branched_rollout(buffer: ReplayBuffer, model: ChunkWorldModel, policy, plan: RolloutPlan,
                     seed, head: ValueHead | None = None, pin_absorbing: bool = True,
                     jobs: int = 1) -> SyntheticBatch:
    """Imagined rollouts in the learned model from buffer states.

    All randomness is drawn up front from one generator, so the result does
    not depend on ``jobs``. Segments stop early when they enter a state the
    model marks as absorbing success.
    """
    entries = buffer.entries
    if not entries:
        raise ValueError("cannot start rollouts from an empty buffer")
    rng = np.random.default_rng(seed)
    M, H = plan.starts_per_batch, plan.horizon
    if plan.scheme == "branched":
        pool = np.array([(e.state, e.instruction) for e in entries])
    else:
        pool = np.array([(e.state, e.instruction) for e in entries if e.chunk_index == 0])
        if len(pool) == 0:
            raise ValueError("buffer has no episode starts for full-horizon rollouts")
    pick = rng.integers(0, len(pool), M)
    s0, instr = pool[pick, 0], pool[pick, 1]
    u_policy = rng.random((M, H))
    u_model = rng.random((M, H))
    noise = None
    if isinstance(policy, FlowNoisePolicy):
        noise = rng.standard_normal((M, H, policy.denoise_steps + 1, policy.dim))

    def work(lo, hi):
        return _rollout_slice(model, policy, s0[lo:hi], instr[lo:hi], u_policy[lo:hi],
                              u_model[lo:hi], None if noise is None else noise[lo:hi],
                              head, pin_absorbing)

    bounds = np.linspace(0, M, max(1, min(jobs, M)) + 1).astype(int)
    parts_idx = list(zip(bounds[:-1], bounds[1:]))
    if jobs <= 1:
        parts = [work(lo, hi) for lo, hi in parts_idx]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(lambda b: work(*b), parts_idx))
    cat = [np.concatenate([p[i] for p in parts]) if parts[0][i] is not None else None
           for i in range(len(parts[0]))]
    states, chunks, logp, rew, nxt, lengths, boot, chains = cat
    return SyntheticBatch(states, instr, chunks, logp, rew, nxt, lengths, boot, chains)


def _rollout_slice(model, policy, s0, instr, u_policy, u_model, noise, head, pin_absorbing):
    M, H = u_policy.shape
    states = np.zeros((M, H), np.int64)
    chunks = np.zeros((M, H), np.int64)
    logp = np.zeros((M, H))
    rew = np.zeros((M, H))
    nxt = np.zeros((M, H), np.int64)
    lengths = np.full(M, H, np.int64)
    chains = None
    if noise is not None:
        chains = np.zeros(noise.shape)
    alive = np.ones(M, bool)
    s = s0.copy()
    absorbed = np.zeros(M, bool)
    for t in range(H):
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        si, li = s[idx], instr[idx]
        c, ch, lp = policy.batch_sample(si, li, u_policy[idx, t],
                                        None if noise is None else noise[idx, t])
        sn = _sample_rows(model.transition_est[si, c], u_model[idx, t])
        states[idx, t], chunks[idx, t], logp[idx, t] = si, c, lp
        rew[idx, t] = model.reward_est[si, c, li]
        nxt[idx, t] = sn
        if chains is not None:
            chains[idx, t] = ch
        s[idx] = sn
        done = model.success_mask[sn, li]
        absorbed[idx[done]] = True
        lengths[idx[done]] = t + 1
        alive[idx[done]] = False
    boot = np.zeros(M)
    end_state = nxt[np.arange(M), lengths - 1]
    if head is not None:
        boot = head(end_state, instr).astype(float)
    if pin_absorbing:
        boot[absorbed] = absorbing_value(model.gamma, model.k)
    return states, chunks, logp, rew, nxt, lengths, boot, chains


# -- advantages and updates -------------------------------------------------

def chunk_gae(batch: SyntheticBatch, head: ValueHead, cfg: GaeConfig):
    """Chunk-level GAE with inter-chunk discount ``gamma^k``.

    Returns ``(advantages, targets)`` shaped like ``batch.states``; entries
    beyond each segment's length are zero.
    """
    if batch.bootstrap is None or not np.all(np.isfinite(batch.bootstrap)):
        raise ValueError("segment bootstrap value missing")
    g, lam = cfg.chunk_gamma, cfg.lam
    M, H = batch.states.shape
    mask = batch.mask
    v = np.where(mask, head(batch.states, batch.instructions[:, None]), 0.0)
    v_next = np.zeros((M, H))
    v_next[:, :-1] = v[:, 1:]
    last = batch.lengths - 1
    v_next[np.arange(M), last] = batch.bootstrap
    delta = np.where(mask, batch.rewards + g * v_next - v, 0.0)
    adv = np.zeros((M, H))
    acc = np.zeros(M)
    for t in range(H - 1, -1, -1):
        acc = delta[:, t] + g * lam * acc * mask[:, t]
        adv[:, t] = acc * mask[:, t]
    return adv, np.where(mask, adv + v, 0.0)


class PpoStats(NamedTuple):
    mean_ratio: float
    clip_fraction: float
    value_loss: float


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float):
    """Per-tuple surrogate value and the weight on ``grad log pi`` (zero when clipped)."""
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    active = ((adv > 0) & (ratio > 1.0 + eps)) | ((adv < 0) & (ratio < 1.0 - eps))
    return surr, np.where(active, 0.0, ratio * adv), active


def ppo_update(batch: SyntheticBatch, advantages: np.ndarray, policy, head: ValueHead | None,
               cfg: GaeConfig, lr: float = 1.0, targets: np.ndarray | None = None) -> PpoStats:
    """In-place clipped-surrogate ascent on ``policy`` and value regression on ``head``.

    Gradients are averaged per (state, instruction) cell, so every visited
    cell takes one mean step per epoch.
    """
    mask = batch.mask
    s = batch.states[mask]
    l = np.broadcast_to(batch.instructions[:, None], mask.shape)[mask]
    c = batch.chunks[mask]
    old = batch.old_logp[mask]
    chains = None if batch.chains is None else batch.chains[mask]
    adv = advantages[mask]
    if cfg.advantage_normalization == "per-batch" and len(adv) > 1:
        adv = (adv - adv.mean()) / np.sqrt(max(adv.var(), 1e-8))
    n_cells = policy.n_instructions if isinstance(policy, FlowNoisePolicy) else policy.logits.shape[1]
    cell = s * n_cells + l
    _, inv, counts = np.unique(cell, return_inverse=True, return_counts=True)
    per_cell = 1.0 / counts[inv]
    ratios, clips = [], []
    for _ in range(cfg.updates_per_batch):
        new = policy.batch_logprob(s, l, c, chains)
        ratio = np.exp(new - old)
        if not np.all(np.isfinite(ratio)):
            bad = int(np.nonzero(~np.isfinite(ratio))[0][0])
            raise FloatingPointError(f"non-finite ratio at tuple {bad} "
                                     f"(state {s[bad]}, chunk {c[bad]})")
        _, w, active = clipped_surrogate(ratio, adv, cfg.clip_epsilon)
        ratios.append(ratio.mean())
        clips.append(active.mean())
        if isinstance(policy, FlowNoisePolicy):
            grads = policy.logprob_grad(s, l, c, w * per_cell, chains)
            grads["gain"] /= len(counts)
        else:
            grads = policy.logprob_grad(s, l, c, w * per_cell)
        policy.apply_update(grads, lr)
    value_loss = 0.0
    if head is not None and targets is not None:
        value_loss = head.regress(s, l, targets[mask], steps=cfg.updates_per_batch)
    return PpoStats(float(np.mean(ratios)), float(np.mean(clips)), value_loss)


# -- the loop ---------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    k: int = 2
    buffer_episodes: int = 50
    episode_chunks: int = 20
    smoothing_alpha: float = 0.1
    view_mode: str = "flat"
    world_model: str = "learned"          # learned | oracle
    corruption_eta: float = 0.0
    corruption_level: str = "pair"        # pair | state
    plan: RolloutPlan = RolloutPlan()
    gae: GaeConfig = GaeConfig(k=2)
    iterations: int = 20
    eval_episodes: int = 100
    policy_lr: float = 1.0
    value_lr: float = 0.5
    pin_absorbing: bool = True
    jobs: int = 1
    record_wallclock: bool = False


class CurvePoint(NamedTuple):
    iteration: int
    eval_success_rate: float
    eval_mean_return: float
    mean_ratio: float
    clip_fraction: float
    value_loss: float
    wallclock_s: float


@dataclass
class RunResult:
    curve: list
    exact_returns: list
    initial_exact_return: float
    policy: object
    head: ValueHead
    model: ChunkWorldModel
    buffer: ReplayBuffer


def _subseed(seed: int, *tags) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


class PhaseError(RuntimeError):
    pass


def _absorbing_states(mdp: LMdp) -> np.ndarray:
    S = mdp.n_states
    return np.all(mdp.transition[np.arange(S), :, np.arange(S)] == 1.0, axis=1)


def episode_return(traj, gamma: float, absorbing: np.ndarray | None = None) -> float:
    """Discounted return, adding the analytic tail if the episode ended absorbed."""
    ret = traj.discounted_return(gamma)
    if traj.success and traj.steps and absorbing is not None and absorbing[traj.steps[-1].next_state]:
        t = sum(len(st.rewards) for st in traj.steps)
        ret += gamma**t / (1.0 - gamma)
    return ret


def instruction_schedule(n_episodes: int, n_instructions: int) -> list:
    return [e % n_instructions for e in range(n_episodes)]


def evaluate(env: LMdp, policy, cfg: RunConfig, seed: int, absorbing=None):
    instrs = instruction_schedule(cfg.eval_episodes, env.n_instructions)
    trajs = env_rollout(env, policy, instrs, cfg.eval_episodes, cfg.episode_chunks, seed, cfg.jobs)
    rets = [episode_return(t, env.gamma, absorbing) for t in trajs]
    return float(np.mean([t.success for t in trajs])), float(np.mean(rets))


def exact_policy_return(env: LMdp, policy, k: int, chunk_mdp=None) -> float:
    """Start-distribution value averaged over instructions, by exact DP."""
    cm = chunk_mdp or lift_to_chunk_mdp(env, k)
    return float(np.mean([expected_return(cm, policy.table(l), l)
                          for l in range(env.n_instructions)]))


def collect_buffer(mdp: LMdp, policy, episodes: int, max_chunks: int, seed: int, k: int,
                   d: int = 1, bins: int | None = None, jobs: int = 1) -> ReplayBuffer:
    """Roll ``policy`` in the true environment and store every chunk."""
    instrs = instruction_schedule(episodes, mdp.n_instructions)
    trajs = env_rollout(mdp, policy, instrs, episodes, max_chunks, seed, jobs)
    buffer = ReplayBuffer(k, d, mdp.n_actions if bins is None else bins)
    for tr in trajs:
        buffer.add_trajectory(tr)
    return buffer


def vla_mbpo_run(env, init_policy, cfg: RunConfig, out_dir=None,
                 buffer: ReplayBuffer | None = None) -> RunResult:
    """Collect once with the initial policy, fit the model once, then iterate
    imagined rollouts and clipped-surrogate updates; evaluate in ``env``.

    ``env`` is an LMdp or an object with an ``mdp`` attribute (and optionally
    ``wrist_of_state`` for interleaved models). A pre-collected ``buffer``
    replaces the collection phase.
    """
    mdp = getattr(env, "mdp", env)
    wrist = getattr(env, "wrist_of_state", None)
    absorbing = _absorbing_states(mdp)
    k = cfg.k
    policy = init_policy.snapshot()
    head = ValueHead.zeros(mdp.n_states, mdp.n_instructions, cfg.value_lr)
    bins = policy.bins if isinstance(policy, FlowNoisePolicy) else mdp.n_actions
    d = policy.d if isinstance(policy, FlowNoisePolicy) else 1
    cm = lift_to_chunk_mdp(mdp, k)

    if buffer is None:
        try:
            buffer = collect_buffer(mdp, policy, cfg.buffer_episodes, cfg.episode_chunks,
                                    _subseed(cfg.seed, 1), k, d, bins, cfg.jobs)
        except Exception as exc:
            raise PhaseError(f"collect: {exc}") from exc
    elif buffer.k != k:
        raise PhaseError(f"collect: buffer chunk size {buffer.k} does not match k={k}")

    try:
        if cfg.world_model == "oracle":
            succ = np.zeros((mdp.n_states, mdp.n_instructions), bool)
            for l in range(mdp.n_instructions):
                succ[:, l] = absorbing & (mdp.reward[:, l] == 1)
            model = oracle_model(cm)
            model.success_mask = succ
        else:
            model = fit_chunk_model(buffer, k, mdp.n_states, cm.n_actions, cfg.smoothing_alpha,
                                    cfg.view_mode if wrist is not None else "flat",
                                    mdp.n_instructions, mdp.gamma, wrist)
        if cfg.corruption_eta > 0:
            model = corrupt_off_data(model, buffer, cfg.corruption_eta,
                                         level=cfg.corruption_level)
    except Exception as exc:
        raise PhaseError(f"fit: {exc}") from exc

    init_exact = exact_policy_return(mdp, policy, k, cm)
    curve, exact = [], []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        try:
            snap = policy.snapshot()
            batch = branched_rollout(buffer, model, snap, cfg.plan, _subseed(cfg.seed, 2, it),
                                     head, cfg.pin_absorbing, cfg.jobs)
            adv, targets = chunk_gae(batch, head, cfg.gae)
            stats = ppo_update(batch, adv, policy, head, cfg.gae, cfg.policy_lr, targets)
            if cfg.pin_absorbing:
                head.values[model.success_mask] = absorbing_value(mdp.gamma, k)
        except Exception as exc:
            raise PhaseError(f"update (iteration {it}): {exc}") from exc
        try:
            sr, mr = evaluate(mdp, policy, cfg, _subseed(cfg.seed, 3, it), absorbing)
        except Exception as exc:
            raise PhaseError(f"evaluate (iteration {it}): {exc}") from exc
        exact.append(exact_policy_return(mdp, policy, k, cm))
        wall = time.perf_counter() - t0 if cfg.record_wallclock else 0.0
        curve.append(CurvePoint(it, sr, mr, stats.mean_ratio, stats.clip_fraction,
                                stats.value_loss, wall))
        for name, v in zip(CurvePoint._fields, curve[-1]):
            if not np.isfinite(v):
                raise PhaseError(f"evaluate (iteration {it}): non-finite {name}")

    result = RunResult(curve, exact, init_exact, policy, head, model, buffer)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_curve_csv(curve, out / "curve.csv")
        save_policy(policy, out / "policy.ckpt", head)
        save_model(model, out / "world_model.ckpt")
    return result


def corrupt_off_data(model: ChunkWorldModel, buffer: ReplayBuffer, eta: float,
                     target: int | None = None, level: str = "state") -> ChunkWorldModel:
    """Mix model rows that lie off the data toward one target state.

    ``level="state"`` corrupts every row of a state never visited in the
    buffer; ``level="rare-state"`` every row of a state visited less often
    than the median state; ``level="pair"`` corrupts every (state, chunk) pair never
    observed. The target defaults to a state the model marks as success, so
    the corruption hallucinates reward away from the data. Chunk rewards of
    corrupted rows are mixed with the target's arrival reward.
    """
    seen = np.zeros((model.n_states, model.n_chunks), bool)
    visits = np.zeros(model.n_states)
    for e in buffer.entries:
        seen[e.state, e.chunk_id] = True
        visits[e.state] += 1
    if level == "state":
        mask = np.repeat((visits == 0)[:, None], model.n_chunks, axis=1)
    elif level == "rare-state":
        mask = np.repeat((visits < np.median(visits))[:, None], model.n_chunks, axis=1)
    elif level == "pair":
        mask = ~seen
    else:
        raise ValueError(f"unknown corruption level {level!r}")
    if target is None:
        succ = np.nonzero(model.success_mask.any(axis=1))[0]
        target = int(succ[0]) if len(succ) else int(np.argmax(model.next_reward.sum(axis=1)))
    adv = np.zeros(model.n_states)
    adv[target] = 1.0
    out = corrupt_model(model, eta, adv, mask)
    out.reward_est[mask] = (1 - eta) * out.reward_est[mask] + eta * out.next_reward[target]
    return out


def write_curve_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CurvePoint._fields)
        for p in curve:
            w.writerow([p.iteration] + [format(float(v), ".17g") for v in p[1:]])
