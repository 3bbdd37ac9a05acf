"""Chunk-level policies and the tabular value head.

Two policy families share one interface (``act``, ``batch_sample``,
``batch_logprob``, ``table``):

* :class:`SoftmaxChunkPolicy` - tabular softmax over chunk-action ids.
* :class:`FlowNoisePolicy` - a K-step stochastic denoising chain whose
  log-likelihood is the sum of the initial Gaussian term and the K Gaussian
  transition terms; the final chain point is tokenized into the chunk.
"""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from .lmdp import chunk_actions
from .world_model import ActionChunk, tokenize_action

LOG_2PI = float(np.log(2.0 * np.pi))


class ChunkDecision(NamedTuple):
    chunk: int
    actions: np.ndarray
    logp: float
    tokens: np.ndarray | None = None
    chain: np.ndarray | None = None


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(eq=False)
class SoftmaxChunkPolicy:
    """``logits[s, l, c]``; probabilities are ``softmax(logits / temperature)``."""

    logits: np.ndarray
    n_actions: int
    k: int
    temperature: float = 1.0
    kind = "softmax"

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=float)
        if self.logits.ndim != 3:
            raise ValueError("logits must be (states, instructions, chunks)")
        if self.logits.shape[2] != self.n_actions**self.k:
            raise ValueError("chunk axis must have n_actions**k entries")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def uniform(cls, n_states, n_instructions, n_actions, k, temperature=1.0):
        return cls(np.zeros((n_states, n_instructions, n_actions**k)), n_actions, k, temperature)

    @property
    def n_chunks(self) -> int:
        return self.logits.shape[2]

    def log_probs(self, states=None, instructions=None) -> np.ndarray:
        z = self.logits if states is None else self.logits[states, instructions]
        z = z / self.temperature
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def probs(self, states=None, instructions=None) -> np.ndarray:
        return np.exp(self.log_probs(states, instructions))

    def table(self, instruction: int = 0) -> np.ndarray:
        """Chunk-action distribution per state, shape (S, C)."""
        return self.probs()[:, instruction, :]

    def decide(self, state, instruction, u: float) -> ChunkDecision:
        lp = self.log_probs(state, instruction)
        c = int(min(np.searchsorted(np.cumsum(np.exp(lp)), u, side="right"), self.n_chunks - 1))
        acts = chunk_actions(c, self.n_actions, self.k)
        return ChunkDecision(c, acts, float(lp[c]), acts[:, None])

    def act(self, state, instruction, rng) -> ChunkDecision:
        return self.decide(state, instruction, _as_rng(rng).random())

    def batch_sample(self, states, instructions, u, noise=None):
        lp = self.log_probs(states, instructions)
        cdf = np.cumsum(np.exp(lp), axis=1)
        c = np.minimum((cdf <= u[:, None]).sum(axis=1), self.n_chunks - 1)
        return c, None, lp[np.arange(len(c)), c]

    def batch_logprob(self, states, instructions, chunks, chains=None) -> np.ndarray:
        return self.log_probs(states, instructions)[np.arange(len(chunks)), chunks]

    def logprob_grad(self, states, instructions, chunks, weights):
        """Sum over samples of ``weights * d log pi / d logits``, as a dense array."""
        p = self.probs(states, instructions)
        g = -p * weights[:, None]
        g[np.arange(len(chunks)), chunks] += weights
        out = np.zeros_like(self.logits)
        np.add.at(out, (states, instructions), g / self.temperature)
        return {"logits": out}

    def apply_update(self, grads, lr: float) -> None:
        self.logits += lr * grads["logits"]

    def snapshot(self) -> "SoftmaxChunkPolicy":
        return copy.deepcopy(self)


def softmax_sample(policy: SoftmaxChunkPolicy, state: int, instruction: int, seed):
    dec = policy.act(state, instruction, seed)
    return dec.chunk, dec.logp


@dataclass(eq=False)
class FlowNoisePolicy:
    """Stochastic K-step denoising chain over a k*d action vector.

    Velocity at chain step ``i``: ``bias[s, l, i] + gain[i] * A``. Each step is
    ``A' = A + dt * v + sigma * sqrt(dt) * xi`` on a uniform tau grid.
    """

    n_states: int
    n_instructions: int
    k: int
    d: int = 1
    denoise_steps: int = 3
    noise_level: float = 0.5
    bins: int = 6
    lo: float = -1.0
    hi: float = 1.0
    bias: np.ndarray | None = None
    gain: np.ndarray | None = None
    tau_grid: np.ndarray | None = field(default=None)
    kind = "flow-noise"

    def __post_init__(self):
        K, D = self.denoise_steps, self.k * self.d
        if K < 1:
            raise ValueError("need at least one denoising step")
        if self.noise_level <= 0:
            raise ValueError("noise level must be positive")
        if self.tau_grid is None:
            self.tau_grid = np.linspace(0.0, 1.0, K + 1)
        tau = np.asarray(self.tau_grid, float)
        if tau.shape != (K + 1,) or tau[0] != 0.0 or tau[-1] != 1.0 or np.any(np.diff(tau) <= 0):
            raise ValueError("tau grid must increase strictly from 0 to 1")
        self.tau_grid = tau
        if self.bias is None:
            self.bias = np.zeros((self.n_states, self.n_instructions, K, D))
        if self.gain is None:
            self.gain = np.zeros((K, D))
        self.bias = np.array(self.bias, float)
        self.gain = np.array(self.gain, float)

    @property
    def dim(self) -> int:
        return self.k * self.d

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.tau_grid)

    @property
    def n_actions(self) -> int:
        return self.bins**self.d

    @property
    def n_chunks(self) -> int:
        return self.bins ** self.dim

    # -- chain mechanics
    def chain_terms(self, chains, states, instructions) -> np.ndarray:
        """Per-sample log-density terms, shape (N, K + 1); column 0 is the prior."""
        A = np.asarray(chains, float)
        dt = self.dt
        sig2 = self.noise_level**2
        D = self.dim
        terms = np.empty(A.shape[:2])
        terms[:, 0] = -0.5 * (D * LOG_2PI + np.sum(A[:, 0] ** 2, axis=1))
        b = self.bias[states, instructions]           # (N, K, D)
        for i in range(self.denoise_steps):
            mean = A[:, i] + dt[i] * (b[:, i] + self.gain[i] * A[:, i])
            var = sig2 * dt[i]
            resid = A[:, i + 1] - mean
            terms[:, i + 1] = -0.5 * (D * np.log(2.0 * np.pi * var) + np.sum(resid**2, axis=1) / var)
        return terms

    def build_chains(self, states, instructions, noise) -> np.ndarray:
        """Run the chain forward from standard-normal draws ``noise`` (N, K+1, D)."""
        noise = np.asarray(noise, float)
        dt = self.dt
        b = self.bias[states, instructions]
        A = np.empty_like(noise)
        A[:, 0] = noise[:, 0]
        for i in range(self.denoise_steps):
            v = b[:, i] + self.gain[i] * A[:, i]
            A[:, i + 1] = A[:, i] + dt[i] * v + self.noise_level * np.sqrt(dt[i]) * noise[:, i + 1]
        if not np.all(np.isfinite(A)):
            raise FloatingPointError("non-finite velocity output in denoising chain")
        return A

    def tokens_of(self, final_points) -> np.ndarray:
        return tokenize_action(final_points, self.lo, self.hi, self.bins)

    def chunk_of_tokens(self, tokens) -> np.ndarray:
        powers = self.bins ** np.arange(self.dim - 1, -1, -1)
        return np.asarray(tokens) @ powers

    def batch_sample(self, states, instructions, u=None, noise=None):
        chains = self.build_chains(states, instructions, noise)
        chunks = self.chunk_of_tokens(self.tokens_of(chains[:, -1]))
        logp = self.chain_terms(chains, states, instructions).sum(axis=1)
        return chunks, chains, logp

    def batch_logprob(self, states, instructions, chunks, chains=None) -> np.ndarray:
        return self.chain_terms(chains, states, instructions).sum(axis=1)

    def act(self, state, instruction, rng) -> ChunkDecision:
        noise = _as_rng(rng).standard_normal((1, self.denoise_steps + 1, self.dim))
        s, l = np.array([state]), np.array([instruction])
        chunks, chains, logp = self.batch_sample(s, l, noise=noise)
        tokens = self.tokens_of(chains[0, -1]).reshape(self.k, self.d)
        acts = ActionChunk(tokens, self.bins).primitive_actions()
        return ChunkDecision(int(chunks[0]), acts, float(logp[0]), tokens, chains[0])

    def logprob_grad(self, states, instructions, chunks, weights, chains=None):
        A = np.asarray(chains, float)
        dt = self.dt
        sig2 = self.noise_level**2
        b = self.bias[states, instructions]
        gb = np.zeros((len(states), self.denoise_steps, self.dim))
        gg = np.zeros_like(self.gain)
        for i in range(self.denoise_steps):
            mean = A[:, i] + dt[i] * (b[:, i] + self.gain[i] * A[:, i])
            score = (A[:, i + 1] - mean) / sig2      # d term / d v, times dt cancels
            gb[:, i] = weights[:, None] * score
            gg[i] = np.sum(weights[:, None] * score * A[:, i], axis=0)
        out = np.zeros_like(self.bias)
        np.add.at(out, (states, instructions), gb)
        return {"bias": out, "gain": gg}

    def apply_update(self, grads, lr: float) -> None:
        self.bias += lr * grads["bias"]
        self.gain += lr * grads["gain"]

    def snapshot(self) -> "FlowNoisePolicy":
        return copy.deepcopy(self)

    # -- exact action distribution
    def final_moments(self, state, instruction):
        """Mean and variance of the final chain point (per dimension)."""
        m = np.zeros(self.dim)
        v = np.ones(self.dim)
        dt = self.dt
        for i in range(self.denoise_steps):
            a = 1.0 + dt[i] * self.gain[i]
            m = a * m + dt[i] * self.bias[state, instruction, i]
            v = a * a * v + self.noise_level**2 * dt[i]
        return m, v

    def token_probs(self, state, instruction) -> np.ndarray:
        """Exact per-dimension bin probabilities, shape (D, bins)."""
        m, v = self.final_moments(state, instruction)
        edges = self.lo + np.arange(1, self.bins) * (self.hi - self.lo) / self.bins
        z = (edges[None, :] - m[:, None]) / np.sqrt(v)[:, None]
        cdf = np.concatenate([np.zeros((self.dim, 1)), ndtr(z), np.ones((self.dim, 1))], axis=1)
        return np.diff(cdf, axis=1)

    def table(self, instruction: int = 0) -> np.ndarray:
        rows = []
        for s in range(self.n_states):
            p = np.ones(1)
            for dim_p in self.token_probs(s, instruction):
                p = np.outer(p, dim_p).ravel()
            rows.append(p)
        return np.array(rows)


def flow_sample(policy: FlowNoisePolicy, state: int, instruction: int, seed, noise=None):
    """Draw one denoising chain; returns ``(chain, ActionChunk, logp)``."""
    if noise is None:
        noise = _as_rng(seed).standard_normal((policy.denoise_steps + 1, policy.dim))
    s, l = np.array([state]), np.array([instruction])
    _, chains, logp = policy.batch_sample(s, l, noise=np.asarray(noise, float)[None])
    tokens = policy.tokens_of(chains[0, -1]).reshape(policy.k, policy.d)
    return chains[0], ActionChunk(tokens, policy.bins), float(logp[0])


def flow_logprob(policy: FlowNoisePolicy, chain, state: int, instruction: int) -> float:
    chain = np.asarray(chain, float)
    if chain.shape != (policy.denoise_steps + 1, policy.dim):
        raise ValueError(f"chain shape {chain.shape} does not match "
                         f"({policy.denoise_steps + 1}, {policy.dim})")
    terms = policy.chain_terms(chain[None], np.array([state]), np.array([instruction]))
    return float(terms.sum(axis=1)[0])


# -- value head -------------------------------------------------------------

@dataclass(eq=False)
class ValueHead:
    """Tabular ``V(s, l)``, zero-initialised."""

    values: np.ndarray
    learning_rate: float = 0.5

    @classmethod
    def zeros(cls, n_states, n_instructions, learning_rate=0.5):
        return cls(np.zeros((n_states, n_instructions)), learning_rate)

    def __call__(self, states, instructions):
        return self.values[states, instructions]

    def regress(self, states, instructions, targets, steps: int = 1) -> float:
        """Per-entry averaged squared-error steps; returns the loss before updating."""
        states = np.asarray(states)
        instructions = np.asarray(instructions)
        targets = np.asarray(targets, float)
        S, L = self.values.shape
        flat = states * L + instructions
        cnt = np.bincount(flat, minlength=S * L).reshape(S, L)
        tsum = np.bincount(flat, weights=targets, minlength=S * L).reshape(S, L)
        seen = cnt > 0
        mean_t = np.divide(tsum, cnt, out=np.zeros_like(tsum), where=seen)
        loss0 = float(np.mean((self.values[states, instructions] - targets) ** 2))
        for _ in range(steps):
            self.values[seen] += self.learning_rate * (mean_t[seen] - self.values[seen])
        return loss0


def value_predict(head: ValueHead, state: int, instruction: int) -> float:
    return float(head.values[state, instruction])


# -- checkpoints ------------------------------------------------------------

def _arr_block(name, arr):
    flat = " ".join(format(float(x), ".17g") for x in np.ravel(arr))
    return f"[{name}]\nshape = {' '.join(map(str, np.shape(arr)))}\n{flat}\n"


def save_policy(policy, path, head: ValueHead | None = None) -> None:
    out = io.StringIO()
    out.write("# chunkmbpo policy v1\n[meta]\n")
    out.write(f"kind = {policy.kind}\nk = {policy.k}\n")
    if policy.kind == "softmax":
        out.write(f"n_actions = {policy.n_actions}\ntemperature = {policy.temperature!r}\n")
        out.write(_arr_block("logits", policy.logits))
    else:
        out.write(f"n_states = {policy.n_states}\nn_instructions = {policy.n_instructions}\n"
                  f"d = {policy.d}\ndenoise_steps = {policy.denoise_steps}\n"
                  f"noise_level = {policy.noise_level!r}\nbins = {policy.bins}\n"
                  f"lo = {policy.lo!r}\nhi = {policy.hi!r}\n")
        out.write(_arr_block("tau_grid", policy.tau_grid))
        out.write(_arr_block("bias", policy.bias))
        out.write(_arr_block("gain", policy.gain))
    if head is not None:
        out.write(f"[value_meta]\nlearning_rate = {head.learning_rate!r}\n")
        out.write(_arr_block("values", head.values))
    Path(path).write_text(out.getvalue())


def load_policy(path):
    """Returns ``(policy, head_or_None)``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "# chunkmbpo policy v1":
        raise ValueError(f"{path}: not a policy checkpoint")
    blocks, meta, cur = {}, {}, None
    i = 1
    while i < len(lines):
        line = lines[i]
        if line in ("[meta]", "[value_meta]"):
            cur = line
        elif line.startswith("["):
            name = line[1:-1]
            shape = tuple(int(x) for x in lines[i + 1].split("=", 1)[1].split())
            data = np.array([float(x) for x in lines[i + 2].split()])
            if data.size != int(np.prod(shape)):
                raise ValueError(f"{path}: block {name} has {data.size} values for shape {shape}")
            blocks[name] = data.reshape(shape)
            i += 3
            continue
        else:
            key, _, val = line.partition(" = ")
            meta[key] = val
        i += 1
    k = int(meta["k"])
    if meta["kind"] == "softmax":
        pol = SoftmaxChunkPolicy(blocks["logits"], int(meta["n_actions"]), k,
                                 float(meta["temperature"]))
    else:
        pol = FlowNoisePolicy(int(meta["n_states"]), int(meta["n_instructions"]), k,
                              int(meta["d"]), int(meta["denoise_steps"]),
                              float(meta["noise_level"]), int(meta["bins"]),
                              float(meta["lo"]), float(meta["hi"]),
                              blocks["bias"], blocks["gain"], blocks["tau_grid"])
    head = None
    if "values" in blocks:
        head = ValueHead(blocks["values"], float(meta["learning_rate"]))
    return pol, head
