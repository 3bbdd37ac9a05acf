"""Chunk-level model-based policy optimization on tabular language-conditioned MDPs."""

from .lmdp import (ChunkMdp, LMdp, chunk_actions, chunk_id, exact_value, expected_return,
                   lift_to_chunk_mdp, model_divergence, policy_divergence, tv_distance,
                   visitation_profile)
from .envs import RandomMdpSpec, env_rollout, make_random_mdp, make_twoview_gridworld
from .world_model import (ActionChunk, ChunkWorldModel, detokenize_action, fit_chunk_model,
                          predict_interleaved, predict_reward, tokenize_action)
from .policy import FlowNoisePolicy, SoftmaxChunkPolicy, ValueHead
from .rl import (GaeConfig, ReplayBuffer, RolloutPlan, RunConfig, branched_rollout,
                 chunk_gae, ppo_update, vla_mbpo_run)
from .theory import (BoundInputs, bound_theorem1, bound_theorem2, case_study,
                     certify_lemmas, certify_theorems, empirical_value_gap)

__version__ = "0.1.0"
