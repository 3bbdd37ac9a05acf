"""Flat vs interleaved two-view world models on the gridworld.

The wrist view depends on the new head view, so predicting it independently
(flat) loses that coupling. Run with ``python3 demos/view_decoding.py``.
"""

from chunkmbpo.experiments import SEEDS, view_decoding

for seed in SEEDS:
    tv = view_decoding(seed, n_chunks=10_000)
    print(f"seed {seed}: wrist-successor TV  flat {tv['flat']:.3f}  interleaved {tv['interleaved']:.3f}")
