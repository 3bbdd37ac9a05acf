"""Fixed experiment protocols on the 3x3 two-view gridworld.

Each protocol fixes its settings up front and returns plain numbers so the
trend checks (improvement, rollout-scheme ordering, value stitching,
sample-size scaling) can be asserted or written to CSV.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .envs import env_rollout, episode_rng, make_twoview_gridworld, run_episode
from .lmdp import exact_value, lift_to_chunk_mdp
from .policy import SoftmaxChunkPolicy
from .rl import (GaeConfig, ReplayBuffer, RolloutPlan, RunConfig, _subseed, vla_mbpo_run)
from .world_model import fit_chunk_model, wrist_successor_tv

GRID = dict(width=3, height=3, instructions=(8,), slip=0.1, gamma=0.99)
BASE = RunConfig(k=2, buffer_episodes=500, episode_chunks=25, iterations=100,
                 eval_episodes=20, gae=GaeConfig(k=2),
                 plan=RolloutPlan.for_sample_size("branched", 2, 25, 512))
SEEDS = (0, 1, 2, 3, 4)
SCHEMES = {"branched-1": ("branched", 1), "branched-2": ("branched", 2),
           "full": ("full", 2)}


def default_env():
    return make_twoview_gridworld(GRID["width"], GRID["height"], list(GRID["instructions"]),
                                  GRID["slip"], GRID["gamma"])


def initial_policy(env, k: int = 2) -> SoftmaxChunkPolicy:
    """Uniformly random chunks: a deliberately poor starting point."""
    return SoftmaxChunkPolicy.uniform(env.n_states, env.mdp.n_instructions,
                                      env.mdp.n_actions, k)


def with_plan(cfg: RunConfig, scheme: str, n: int, sample_size: int) -> RunConfig:
    return replace(cfg, plan=RolloutPlan.for_sample_size(scheme, n, cfg.episode_chunks,
                                                        sample_size))


def improvement(seed: int, cfg: RunConfig = BASE) -> tuple:
    """``(initial exact return, final exact return)`` with the learned model."""
    env = default_env()
    res = vla_mbpo_run(env, initial_policy(env, cfg.k), replace(cfg, seed=seed))
    return res.initial_exact_return, res.exact_returns[-1]


def scheme_ablation(seed: int, cfg: RunConfig = BASE, eta: float = 0.3,
                    sample_size: int = 512) -> dict:
    """Final exact return per rollout scheme, model corrupted on rarely visited states."""
    env = default_env()
    out = {}
    for name, (scheme, n) in SCHEMES.items():
        run = replace(with_plan(cfg, scheme, n, sample_size), seed=seed,
                      corruption_eta=eta, corruption_level="rare-state")
        out[name] = vla_mbpo_run(env, initial_policy(env, cfg.k), run).exact_returns[-1]
    return out


def stitching_correlation(env, res, seed: int, n_episodes: int = 50,
                          full_length: bool = False) -> float:
    """Pearson r between value-head predictions and exact values on the
    states of true-environment episodes of the trained policy.

    By default episodes end at success, so only decision states count.
    ``full_length`` keeps stepping through the absorbing goal, whose head
    value is pinned rather than learned.
    """
    k = res.model.k
    cm = lift_to_chunk_mdp(env.mdp, k)
    v_exact = exact_value(cm, res.policy.table(0), 0)
    states = []
    for e in range(n_episodes):
        traj = run_episode(env.mdp, res.policy, 0, BASE.episode_chunks,
                           episode_rng(seed + 7919, e), stop_on_success=not full_length)
        states += [st.state for st in traj.steps]
    states = np.array(states)
    pred = res.head(states, np.zeros_like(states))
    return float(np.corrcoef(pred, v_exact[states])[0, 1])


def value_stitching(seed: int, cfg: RunConfig = BASE, n_episodes: int = 50) -> float:
    env = default_env()
    res = vla_mbpo_run(env, initial_policy(env, cfg.k), replace(cfg, seed=seed))
    return stitching_correlation(env, res, seed, n_episodes)


def view_decoding(seed: int, n_chunks: int = 10_000, episode_chunks: int = 25, k: int = 2,
                  smoothing_alpha: float = 0.1) -> dict:
    """Wrist-successor TV to truth for flat and interleaved models fitted on
    ``n_chunks`` chunks of uniformly random play."""
    env = default_env()
    episodes = n_chunks // episode_chunks
    trajs = env_rollout(env.mdp, initial_policy(env, k), 0, episodes, episode_chunks,
                        _subseed(seed, 1), stop_on_success=False)
    buffer = ReplayBuffer(k, 1, env.mdp.n_actions)
    for tr in trajs:
        buffer.add_trajectory(tr)
    cm = lift_to_chunk_mdp(env.mdp, k)
    out = {}
    for mode in ("flat", "interleaved"):
        model = fit_chunk_model(buffer, k, env.n_states, cm.n_actions, smoothing_alpha, mode,
                                1, env.mdp.gamma, env.wrist_of_state)
        out[mode] = float(wrist_successor_tv(model, cm.chunk_transition, env.wrist_of_state))
    return out


def sample_size_sweep(seeds=SEEDS, sizes=(128, 512, 2048), cfg: RunConfig = BASE) -> dict:
    """Mean final exact return over seeds for each synthetic batch size."""
    env = default_env()
    out = {}
    for size in sizes:
        finals = []
        for seed in seeds:
            run = replace(with_plan(cfg, "branched", cfg.plan.n, size), seed=seed)
            finals.append(vla_mbpo_run(env, initial_policy(env, cfg.k), run).exact_returns[-1])
        out[size] = float(np.mean(finals))
    return out
