import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkmbpo.policy import (FlowNoisePolicy, SoftmaxChunkPolicy, ValueHead, flow_logprob,
                              flow_sample, load_policy, save_policy, softmax_sample,
                              value_predict)

from oracles import chain_logpdf


def random_flow(seed, S=3, L=2, k=2, K=3, sigma=0.4, bins=4):
    rng = np.random.default_rng(seed)
    return FlowNoisePolicy(S, L, k, 1, K, sigma, bins,
                           bias=rng.normal(size=(S, L, K, k)), gain=rng.normal(0, 0.5, (K, k)))


def test_softmax_rows_and_temperature():
    logits = np.random.default_rng(0).normal(size=(3, 2, 4))
    hot = SoftmaxChunkPolicy(logits, 2, 2, temperature=1.0)
    cold = SoftmaxChunkPolicy(logits, 2, 2, temperature=0.1)
    np.testing.assert_allclose(hot.probs().sum(axis=-1), 1.0)
    assert cold.probs().max() > hot.probs().max()
    assert hot.table(1).shape == (3, 4)


def test_softmax_decide_inverts_cdf():
    pol = SoftmaxChunkPolicy(np.log(np.array([[[0.1, 0.2, 0.3, 0.4]]])), 2, 2)
    assert [pol.decide(0, 0, u).chunk for u in (0.05, 0.15, 0.45, 0.95)] == [0, 1, 2, 3]
    dec = pol.decide(0, 0, 0.95)
    assert dec.actions.tolist() == [1, 1]
    assert dec.logp == pytest.approx(np.log(0.4))
    c, lp = softmax_sample(pol, 0, 0, 3)
    assert lp == pytest.approx(np.log(pol.probs()[0, 0, c]))


def test_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    pol = SoftmaxChunkPolicy(rng.normal(size=(3, 2, 4)), 2, 2, temperature=0.7)
    s = rng.integers(0, 3, 10)
    l = rng.integers(0, 2, 10)
    c = rng.integers(0, 4, 10)
    w = rng.normal(size=10)
    g = pol.logprob_grad(s, l, c, w)["logits"]

    def f(logits):
        return float(np.sum(w * SoftmaxChunkPolicy(logits, 2, 2, 0.7).batch_logprob(s, l, c)))

    fd = np.zeros_like(pol.logits)
    h = 1e-6
    for idx in np.ndindex(pol.logits.shape):
        up, dn = pol.logits.copy(), pol.logits.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (f(up) - f(dn)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


@given(st.integers(0, 5000), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_flow_chain_sum_matches_scipy(seed, K):
    pol = random_flow(seed, K=K)
    chain, chunk, logp = flow_sample(pol, 1, 1, seed)
    ref = chain_logpdf(chain, pol.bias[1, 1], pol.gain, pol.tau_grid, pol.noise_level)
    assert logp == pytest.approx(ref, rel=1e-12, abs=1e-12)
    assert flow_logprob(pol, chain, 1, 1) == logp
    assert 0 <= chunk.chunk_id < pol.n_chunks


def test_flow_gradients_match_finite_differences():
    pol = random_flow(7)
    rng = np.random.default_rng(2)
    N = 6
    s = rng.integers(0, 3, N)
    l = rng.integers(0, 2, N)
    w = rng.normal(size=N)
    _, chains, _ = pol.batch_sample(s, l, noise=rng.standard_normal((N, 4, 2)))
    g = pol.logprob_grad(s, l, None, w, chains)

    def f(bias, gain):
        q = FlowNoisePolicy(3, 2, 2, 1, 3, 0.4, 4, bias=bias, gain=gain)
        return float(np.sum(w * q.batch_logprob(s, l, None, chains)))

    h = 1e-6
    for name in ("bias", "gain"):
        base = getattr(pol, name)
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up, dn = base.copy(), base.copy()
            up[idx] += h
            dn[idx] -= h
            args_up = (up, pol.gain) if name == "bias" else (pol.bias, up)
            args_dn = (dn, pol.gain) if name == "bias" else (pol.bias, dn)
            fd[idx] = (f(*args_up) - f(*args_dn)) / (2 * h)
        nz = np.abs(fd) > 1e-6
        np.testing.assert_allclose(g[name][nz], fd[nz], rtol=1e-5)
        np.testing.assert_allclose(g[name][~nz], 0.0, atol=1e-6)


def test_flow_token_probs_match_sampling():
    pol = random_flow(3, K=2)
    probs = pol.token_probs(0, 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    rng = np.random.default_rng(5)
    n = 40_000
    chunks, _, _ = pol.batch_sample(np.zeros(n, int), np.zeros(n, int),
                                    noise=rng.standard_normal((n, 3, 2)))
    emp = np.bincount(chunks, minlength=pol.n_chunks) / n
    table = pol.table(0)[0]
    assert table.sum() == pytest.approx(1.0)
    assert np.max(np.abs(emp - table)) < 4 * np.sqrt(0.25 / n)


def test_flow_rejects_bad_chain_and_grid():
    pol = random_flow(0)
    with pytest.raises(ValueError, match="chain shape"):
        flow_logprob(pol, np.zeros((2, 2)), 0, 0)
    with pytest.raises(ValueError, match="tau grid"):
        FlowNoisePolicy(2, 1, 1, tau_grid=np.array([0.0, 0.7, 0.5, 1.0]))


def test_value_head_regression_steps():
    head = ValueHead.zeros(3, 1, learning_rate=0.5)
    loss = head.regress([0, 0, 2], [0, 0, 0], [1.0, 3.0, 4.0], steps=2)
    assert loss == pytest.approx((1 + 9 + 16) / 3)
    assert value_predict(head, 0, 0) == pytest.approx(2.0 * 0.75)
    assert value_predict(head, 2, 0) == pytest.approx(4.0 * 0.75)
    assert value_predict(head, 1, 0) == 0.0


@pytest.mark.parametrize("kind", ["softmax", "flow"])
def test_policy_checkpoint_roundtrip(tmp_path, kind):
    if kind == "softmax":
        pol = SoftmaxChunkPolicy(np.random.default_rng(0).normal(size=(3, 2, 4)), 2, 2, 0.5)
    else:
        pol = random_flow(4)
    head = ValueHead(np.arange(6.0).reshape(3, 2))
    save_policy(pol, tmp_path / "p.ckpt", head)
    back, back_head = load_policy(tmp_path / "p.ckpt")
    np.testing.assert_array_equal(back.table(1), pol.table(1))
    np.testing.assert_array_equal(back_head.values, head.values)
