"""Train a chunk policy on the 3x3 gridworld with branched model rollouts.

Prints the exact return every 10 iterations, then how well the value head
tracks exact values along true-environment episodes.
Run with ``python3 demos/gridworld_training.py [seed]``.
"""

import sys
from dataclasses import replace

from chunkmbpo import experiments as ex
from chunkmbpo.rl import vla_mbpo_run

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
env = ex.default_env()
cfg = replace(ex.BASE, seed=seed)

res = vla_mbpo_run(env, ex.initial_policy(env, cfg.k), cfg)
print(f"initial policy: exact return {res.initial_exact_return:.2f}")
for it in range(9, len(res.exact_returns), 10):
    print(f"iteration {it + 1:3d}: exact return {res.exact_returns[it]:.2f}")

r = ex.stitching_correlation(env, res, seed)
print(f"value head vs exact values on decision states: r = {r:.2f}")
