import numpy as np
import pytest

from chunkmbpo.envs import make_twoview_gridworld
from chunkmbpo.lmdp import lift_to_chunk_mdp
from chunkmbpo.policy import SoftmaxChunkPolicy
from chunkmbpo.rl import BufferEntry, ReplayBuffer, collect_buffer
from chunkmbpo.world_model import (ActionChunk, chunk_reward_label, corrupt_model,
                                   detokenize_action, fit_chunk_model, load_model,
                                   oracle_model, predict_interleaved, predict_reward,
                                   save_model, tokenize_action, wrist_successor_tv)


def entry(s, c, sn, rewards=(0, 0), ep=0, idx=0, k=2, A=3, l=0):
    return BufferEntry(s, l, ActionChunk.from_id(c, k, 1, A), tuple(rewards), sn,
                       bool(rewards[-1]), ep, idx)


@pytest.mark.parametrize("bins", [1, 2, 7, 256])
def test_tokenize_exhaustive_roundtrip(bins):
    tokens = np.arange(bins)
    centres = detokenize_action(tokens, -1.0, 1.0, bins)
    np.testing.assert_array_equal(tokenize_action(centres, -1.0, 1.0, bins), tokens)
    assert tokenize_action([-5.0, 5.0], -1, 1, bins).tolist() == [0, bins - 1]


def test_tokenize_rejects_nonfinite_and_out_of_range():
    with pytest.raises(ValueError, match="non-finite"):
        tokenize_action([np.nan])
    with pytest.raises(ValueError, match="out of range"):
        detokenize_action([4], bins=4)


def test_action_chunk_ids_exhaustive():
    seen = set()
    for cid in range(3**4):
        ch = ActionChunk.from_id(cid, 2, 2, 3)
        assert ch.chunk_id == cid
        seen.add(ch)
    assert len(seen) == 81
    ch = ActionChunk(np.array([[1, 2], [0, 1]]), 3)
    assert ch.primitive_actions().tolist() == [5, 1]


def test_chunk_reward_label():
    assert chunk_reward_label([0, 1, 1], 0.5) == 0.5 + 0.25


def test_fit_counts_smoothing_and_fallback():
    buf = ReplayBuffer(2, 1, 3)
    buf.add(entry(0, 4, 1, (0, 1), ep=0, idx=0))
    buf.add(entry(0, 4, 1, (0, 1), ep=1, idx=0))
    buf.add(entry(0, 4, 2, (0, 0), ep=2, idx=0))
    m = fit_chunk_model(buf, 2, 3, 9, smoothing_alpha=0.5, gamma=0.9)
    np.testing.assert_allclose(m.transition_est[0, 4], np.array([0.5, 2.5, 1.5]) / 4.5)
    np.testing.assert_allclose(m.transition_est[1, 0], 1 / 3)
    assert m.support[0, 4] and m.support.sum() == 1
    assert m.reward_est[0, 4, 0] == pytest.approx(2 * 0.9 / 3)
    assert m.success_mask[1, 0] and not m.success_mask[2, 0]
    # unseen pair: expected arrival-state reward under the fallback row
    assert m.reward_est[2, 0, 0] == pytest.approx(m.next_reward[:, 0].mean())


def test_fit_rejects_misaligned_chunks():
    buf = ReplayBuffer(2, 1, 3)
    buf.add(entry(0, 1, 1))
    with pytest.raises(ValueError, match="misalignment"):
        fit_chunk_model(buf, 3, 3, 27)
    with pytest.raises(ValueError, match="empty"):
        fit_chunk_model(ReplayBuffer(2, 1, 3), 2, 3, 9)


@pytest.fixture(scope="module")
def grid_data():
    env = make_twoview_gridworld(3, 3, [8], 0.1, 0.99)
    pol = SoftmaxChunkPolicy.uniform(env.n_states, 1, 6, 2)
    buf = collect_buffer(env.mdp, pol, 120, 15, 0, 2)
    return env, buf


def test_interleaved_conditionals_reproduce_counts(grid_data):
    env, buf = grid_data
    m = fit_chunk_model(buf, 2, env.n_states, 36, 0.1, "interleaved", 1, 0.99,
                        env.wrist_of_state)
    e = buf.entries[0]
    w = env.wrist_of_state[e.state]
    n = sum(1 for x in buf.entries if env.wrist_of_state[x.state] == w and x.next_state == e.next_state)
    hit = sum(1 for x in buf.entries if env.wrist_of_state[x.state] == w and x.next_state == e.next_state
              and env.wrist_of_state[x.next_state] == env.wrist_of_state[e.next_state])
    law = m.wrist_est(int(w), e.next_state)
    assert law[env.wrist_of_state[e.next_state]] == pytest.approx((hit + 0.1) / (n + 0.1 * m.n_wrists))
    joint = m.view_joint(e.state, e.chunk_id)
    assert joint.sum() == pytest.approx(1.0)
    h, wn = predict_interleaved(m, e.state, int(w), e.chunk, 0)
    assert 0 <= h < env.n_states and 0 <= wn < m.n_wrists
    with pytest.raises(ValueError):
        m.wrist_flat(0, 0, 0)


def test_interleaved_wrist_tv_below_flat(grid_data):
    env, buf = grid_data
    cm = lift_to_chunk_mdp(env.mdp, 2)
    tvs = {}
    for mode in ("flat", "interleaved"):
        m = fit_chunk_model(buf, 2, env.n_states, 36, 0.1, mode, 1, 0.99, env.wrist_of_state)
        tvs[mode] = wrist_successor_tv(m, cm.chunk_transition, env.wrist_of_state)
    assert tvs["interleaved"] < tvs["flat"]


def test_wrist_tv_is_zero_for_a_perfect_conditional():
    # two heads share wrist 0 and move to heads with distinct wrists
    wrist = np.array([0, 0, 1, 2])
    buf = ReplayBuffer(1, 1, 1)
    for ep, (s, sn) in enumerate([(0, 2), (1, 3)] * 5):
        buf.add(BufferEntry(s, 0, ActionChunk([0], 1), (0,), sn, False, ep, 0))
    true_k = np.zeros((4, 1, 4))
    true_k[0, 0, 2] = true_k[1, 0, 3] = true_k[2, 0, 2] = true_k[3, 0, 3] = 1.0
    m = fit_chunk_model(buf, 1, 4, 1, 0.0, "interleaved", 1, 0.9, wrist)
    assert wrist_successor_tv(m, true_k, wrist) == 0.0


def test_predict_reward_modes(grid_data):
    env, buf = grid_data
    m = fit_chunk_model(buf, 2, env.n_states, 36)
    e = buf.entries[3]
    assert predict_reward(m, e.state, e.chunk, 0) == m.reward_est[e.state, e.chunk_id, 0]
    assert predict_reward(m, None, 0, 0, next_state=e.next_state) == m.next_reward[e.next_state, 0]
    with pytest.raises(ValueError, match="instruction"):
        predict_reward(m, 0, 0, 3)


def test_oracle_and_corruption():
    env = make_twoview_gridworld(2, 2, [3], 0.0, 0.9)
    cm = lift_to_chunk_mdp(env.mdp, 1)
    m = oracle_model(cm, env.success_states)
    assert m.success_mask[env.success_states[0], 0]
    adv = np.zeros(env.n_states)
    adv[0] = 1.0
    bad = corrupt_model(m, 0.25, adv)
    np.testing.assert_allclose(bad.transition_est, 0.75 * m.transition_est + 0.25 * adv)
    np.testing.assert_array_equal(m.transition_est, cm.chunk_transition)
    with pytest.raises(ValueError):
        corrupt_model(m, 1.5, adv)


def test_model_checkpoint_roundtrip(tmp_path, grid_data):
    env, buf = grid_data
    m = fit_chunk_model(buf, 2, env.n_states, 36, 0.1, "interleaved", 1, 0.99, env.wrist_of_state)
    save_model(m, tmp_path / "wm.ckpt")
    back = load_model(tmp_path / "wm.ckpt")
    np.testing.assert_array_equal(back.transition_est, m.transition_est)
    np.testing.assert_array_equal(back.reward_est, m.reward_est)
    np.testing.assert_array_equal(back.support, m.support)
    assert back.view_mode == "interleaved" and back.k == 2
    (tmp_path / "bad.ckpt").write_text("nonsense\n")
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.ckpt")
