"""Acceptance checks, one test per criterion, each at its stated tolerance.

Every test records a one-line PASS/FAIL summary (printed at the end of the
pytest run). Criteria that this implementation does not meet are marked
``xfail(strict=True)``: they still compute and assert the real criterion,
and the suite turns red if one of them starts passing.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import kstest, norm

from chunkmbpo import experiments as ex
from chunkmbpo.cli import main
from chunkmbpo.config import SEED_ENV_VAR
from chunkmbpo.envs import RandomMdpSpec, make_random_mdp
from chunkmbpo.lmdp import exact_value, lift_to_chunk_mdp
from chunkmbpo.policy import FlowNoisePolicy, ValueHead
from chunkmbpo.rl import GaeConfig, SyntheticBatch, chunk_gae, vla_mbpo_run
from chunkmbpo.theory import case_study, certify_lemmas, certify_theorems, min_margin

from oracles import chain_logpdf, random_stochastic, reference_gae, stepwise_chunk_value

# -- shared experiment runs ----------------------------------------------------

_RUNS = {}


def protocol_run(seed, scheme="branched", n=2, sample_size=512, eta=0.0):
    """Cached vla_mbpo_run on the 3x3 gridworld under the fixed protocol."""
    key = (seed, scheme, n, sample_size, eta)
    if key not in _RUNS:
        env = ex.default_env()
        cfg = replace(ex.with_plan(ex.BASE, scheme, n, sample_size), seed=seed,
                      corruption_eta=eta, corruption_level="rare-state")
        t0 = time.perf_counter()
        res = vla_mbpo_run(env, ex.initial_policy(env, cfg.k), cfg)
        _RUNS[key] = (env, res, time.perf_counter() - t0)
    return _RUNS[key]


def count(flags):
    return int(sum(bool(f) for f in flags))


# -- 1 ---------------------------------------------------------------------------

PUBLISHED_INTEGERS = (4183, 18916, 1710, 400)
STATED_DECIMALS = (4183.3, 18916.4, 1710.8, 400.0)


def test_case_study_integers(criterion):
    t0 = time.perf_counter()
    coeffs = case_study(0.99, 10, 2, 1.0)
    elapsed = time.perf_counter() - t0
    # the published integers are the exact values with the fraction dropped;
    # rounding to 12 decimals first keeps 399.99999999999966 at 400
    ints = tuple(math.floor(round(c, 12)) for c in coeffs)
    ok = ints == PUBLISHED_INTEGERS and elapsed < 1.0
    criterion(1, "case-study integers", ok,
              f"exact {tuple(round(c, 4) for c in coeffs)} -> {ints}, {elapsed * 1e3:.2f} ms")
    assert ok


@pytest.mark.xfail(strict=True, reason="stated 18916.4 disagrees with the closed form "
                                       "(exact value 18916.58, so 18916.6 at 1 decimal)")
def test_case_study_decimals(criterion):
    coeffs = case_study(0.99, 10, 2, 1.0)
    dec = tuple(round(c, 1) for c in coeffs)
    ok = dec == STATED_DECIMALS
    criterion(1, "case-study decimals", ok, f"computed {dec} vs stated {STATED_DECIMALS}")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def test_theorem_soundness(criterion):
    t0 = time.perf_counter()
    reports = certify_theorems(500, seed=0, max_states=8)
    elapsed = time.perf_counter() - t0
    by = {}
    for r in reports:
        by.setdefault(r.scheme.split("-")[0], []).append(r.margin)
    mins = {k: min(v) for k, v in by.items()}
    ok = (set(by) == {"full", "branched"} and all(len(v) == 500 for v in by.values())
          and all(m >= -1e-9 for m in mins.values()) and elapsed < 300)
    criterion(2, "theorem soundness", ok,
              f"500 instances, min margin full {mins['full']:.3e}, "
              f"branched {mins['branched']:.3e}, {elapsed:.1f} s")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_lemma_certification(criterion):
    t0 = time.perf_counter()
    rows = certify_lemmas(500, sizes=(2, 16), horizon=20, seed=0)
    elapsed = time.perf_counter() - t0
    by = {}
    for r in rows:
        by.setdefault(r.lemma, []).append(r.margin)
    mins = {k: min(v) for k, v in by.items()}
    # recomposition rows store 1e-12 - relative error, so >= 0 means within 1e-12
    ok = (mins["joint-tv"] >= -1e-12 and mins["rollout-tv"] >= -1e-12
          and mins["recompose-thm1"] >= 0 and mins["recompose-thm2"] >= 0
          and all(len(v) == 500 for v in by.values()) and elapsed < 120)
    criterion(3, "lemma certification", ok,
              ", ".join(f"{k} {v:.2e}" for k, v in mins.items()) + f", {elapsed:.1f} s")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_chunk_lifting_equivalence(criterion):
    worst = 0.0
    for i in range(50):
        k = (1, 2, 5, 10)[i % 4]
        rng = np.random.default_rng(1000 + i)
        S = int(rng.integers(2, 6))
        mdp = make_random_mdp(RandomMdpSpec(S, 2, 1, 0.4, 1.0, 1000 + i,
                                            float(rng.choice([0.5, 0.8, 0.9]))))
        cm = lift_to_chunk_mdp(mdp, k)
        pi = random_stochastic(rng, (S, cm.n_actions), alpha=float(rng.choice([0.2, 1.0])))
        lifted = exact_value(cm, pi)
        stepwise = stepwise_chunk_value(mdp.transition, mdp.reward[:, 0], mdp.gamma, pi, k)
        worst = max(worst, float(np.max(np.abs(lifted - stepwise))))
    ok = worst <= 1e-10
    criterion(4, "chunk-lift equivalence", ok, f"50 combinations, max |diff| {worst:.2e}")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_gae_reduction(criterion):
    rng = np.random.default_rng(5)
    worst_ref = worst_tel = 0.0
    for _ in range(100):
        H = int(rng.integers(1, 30))
        head = ValueHead(rng.normal(0, 5, (10, 1)))
        states = rng.integers(0, 10, (1, H))
        rewards = (rng.random((1, H)) < 0.3).astype(float)
        boot = rng.normal(0, 5, 1)
        b = SyntheticBatch(states, np.zeros(1, int), np.zeros((1, H), int), np.zeros((1, H)),
                           rewards, states, np.array([H]), boot)
        gamma, lam = float(rng.uniform(0.8, 0.999)), float(rng.uniform(0, 1))
        adv, _ = chunk_gae(b, head, GaeConfig(gamma, lam, k=1))
        v = head.values[states[0], 0]
        ref = reference_gae(rewards[0], v, boot[0], gamma, lam)
        worst_ref = max(worst_ref, float(np.max(np.abs(adv[0] - ref))))
        adv1, _ = chunk_gae(b, head, GaeConfig(gamma, 1.0, k=1))
        disc = gamma ** np.arange(H)
        for t in range(H):
            ret = float(np.sum(disc[:H - t] * rewards[0, t:]) + gamma ** (H - t) * boot[0])
            worst_tel = max(worst_tel, abs(adv1[0, t] - (ret - v[t])))
    ok = worst_ref <= 1e-12 and worst_tel <= 1e-12
    criterion(5, "GAE reduction", ok,
              f"100 segments, k=1 vs reference {worst_ref:.2e}, lambda=1 telescoping {worst_tel:.2e}")
    assert ok


# -- 6 ---------------------------------------------------------------------------

def test_flow_noise_correctness(criterion):
    rng = np.random.default_rng(6)
    # chain-sum self-consistency against an independent density
    pol = FlowNoisePolicy(4, 2, 3, 1, 4, 0.3, 5, bias=rng.normal(size=(4, 2, 4, 3)),
                          gain=rng.normal(0, 0.5, (4, 3)))
    N = 200
    s, l = rng.integers(0, 4, N), rng.integers(0, 2, N)
    _, chains, logp = pol.batch_sample(s, l, noise=rng.standard_normal((N, 5, 3)))
    ref = np.array([chain_logpdf(chains[i], pol.bias[s[i], l[i]], pol.gain, pol.tau_grid, 0.3)
                    for i in range(N)])
    chain_err = float(np.max(np.abs(logp - ref) / np.maximum(1.0, np.abs(ref))))
    recompute = float(np.max(np.abs(pol.batch_logprob(s, l, None, chains) - logp)))

    # 1-D, K=1: A1 = (1 + g) A0 + b + sigma xi
    b, g, sig = 0.3, -0.4, 0.5
    one = FlowNoisePolicy(1, 1, 1, 1, 1, sig, 4, bias=np.full((1, 1, 1, 1), b),
                          gain=np.full((1, 1), g))
    n = 100_000
    _, ch1, _ = one.batch_sample(np.zeros(n, int), np.zeros(n, int),
                                 noise=np.random.default_rng(60).standard_normal((n, 2, 1)))
    ks = kstest(ch1[:, -1, 0], norm(loc=b, scale=np.sqrt((1 + g) ** 2 + sig**2)).cdf).statistic

    # analytic vs central finite-difference gradients
    w = rng.normal(size=N)
    grads = pol.logprob_grad(s, l, None, w, chains)
    h, worst_rel = 1e-6, 0.0

    def f(bias, gain):
        q = FlowNoisePolicy(4, 2, 3, 1, 4, 0.3, 5, bias=bias, gain=gain)
        return float(np.sum(w * q.batch_logprob(s, l, None, chains)))

    for name in ("bias", "gain"):
        base = getattr(pol, name)
        for idx in np.ndindex(base.shape):
            up, dn = base.copy(), base.copy()
            up[idx] += h
            dn[idx] -= h
            pair = [(up, pol.gain), (dn, pol.gain)] if name == "bias" else [(pol.bias, up), (pol.bias, dn)]
            fd = (f(*pair[0]) - f(*pair[1])) / (2 * h)
            an = grads[name][idx]
            if abs(fd) > 1e-3:
                worst_rel = max(worst_rel, abs(an - fd) / abs(fd))
            else:
                assert abs(an - fd) < 1e-6
    ok = chain_err < 1e-13 and recompute == 0.0 and ks <= 0.02 and worst_rel <= 1e-5
    criterion(6, "flow-noise correctness", ok,
              f"chain-sum rel err {chain_err:.1e}, KS {ks:.4f} at 100k, "
              f"grad rel err {worst_rel:.1e}")
    assert ok


# -- 7 ---------------------------------------------------------------------------

def test_interleaved_decoding_advantage(criterion):
    res = [ex.view_decoding(seed, n_chunks=10_000) for seed in ex.SEEDS]
    wins = count(r["interleaved"] <= r["flat"] for r in res)
    ok = wins >= 4
    detail = "; ".join(f"{r['interleaved']:.3f}/{r['flat']:.3f}" for r in res)
    criterion(7, "interleaved decoding", ok,
              f"{wins}/5 seeds interleaved <= flat (interleaved/flat wrist TV: {detail})")
    assert ok


# -- 8 ---------------------------------------------------------------------------

def test_policy_improvement(criterion):
    rows = [protocol_run(seed) for seed in ex.SEEDS]
    finals = [res.exact_returns[-1] for _, res, _ in rows]
    init = rows[0][1].initial_exact_return
    wins = count(f > res.initial_exact_return for f, (_, res, _) in zip(finals, rows))
    slowest = max(t for _, _, t in rows)
    ok = wins >= 4 and slowest < 600
    criterion(8, "policy improvement", ok,
              f"{wins}/5 seeds improve on {init:.2f}: "
              + ", ".join(f"{f:.2f}" for f in finals) + f"; slowest seed {slowest:.1f} s")
    assert ok


# -- 9 ---------------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="branched n=2 beats full horizon on every seed but "
                                       "ties with n=1 are a coin flip; see the ledger")
def test_rollout_scheme_ablation(criterion):
    per_seed = []
    for seed in ex.SEEDS:
        per_seed.append({name: protocol_run(seed, scheme, n, 512, 0.3)[1].exact_returns[-1]
                         for name, (scheme, n) in ex.SCHEMES.items()})
    good = [r["branched-2"] >= r["branched-1"] and r["branched-2"] > r["full"] for r in per_seed]
    over_full = count(r["branched-2"] > r["full"] for r in per_seed)
    over_n1 = count(r["branched-2"] >= r["branched-1"] for r in per_seed)
    ok = count(good) >= 4
    detail = "; ".join(f"{r['branched-2']:.1f}/{r['branched-1']:.1f}/{r['full']:.1f}"
                       for r in per_seed)
    criterion(9, "rollout-scheme ablation", ok,
              f"{count(good)}/5 seeds (n2>full {over_full}/5, n2>=n1 {over_n1}/5; "
              f"n2/n1/full: {detail})")
    assert ok


# -- 10 --------------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="with the learned model the head is accurate only "
                                       "near the data; see the ledger")
def test_value_stitching(criterion):
    rs, oracle_rs, full_rs = [], [], []
    for seed in ex.SEEDS:
        env, res, _ = protocol_run(seed)
        rs.append(ex.stitching_correlation(env, res, seed))
        full_rs.append(ex.stitching_correlation(env, res, seed, full_length=True))
    for seed in ex.SEEDS[:2]:
        env = ex.default_env()
        cfg = replace(ex.BASE, seed=seed, world_model="oracle")
        res = vla_mbpo_run(env, ex.initial_policy(env), cfg)
        oracle_rs.append(ex.stitching_correlation(env, res, seed))
    hits = count(r >= 0.8 for r in rs)
    ok = hits >= 4
    criterion(10, "value stitching", ok,
              f"{hits}/5 seeds r >= 0.8 on decision states: "
              + ", ".join(f"{r:.2f}" for r in rs)
              + " | diagnostics: incl. pinned goal state "
              + ", ".join(f"{r:.2f}" for r in full_rs)
              + "; oracle model " + ", ".join(f"{r:.2f}" for r in oracle_rs))
    assert ok


# -- 11 --------------------------------------------------------------------------

def test_sample_size_scaling(criterion):
    sizes = (128, 512, 2048)
    means = [float(np.mean([protocol_run(seed, sample_size=m)[1].exact_returns[-1]
                            for seed in ex.SEEDS])) for m in sizes]
    ok = all(a <= b for a, b in zip(means, means[1:]))
    criterion(11, "sample-size scaling", ok,
              ", ".join(f"{m}: {v:.2f}" for m, v in zip(sizes, means)))
    assert ok


# -- 12 --------------------------------------------------------------------------

def test_determinism(criterion, tmp_path, monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    small = ["--set", "collect.episodes=40", "--set", "collect.max_chunks=10",
             "--set", "run.iterations=3", "--set", "run.eval_episodes=4",
             "--set", "rollout.sample_size=64", "--set", "rollout.max_chunks=10",
             "--set", "world_model.view_mode=both",
             "--set", "certify.instances=30", "--set", "certify.lemma_instances=30",
             "--set", "general.seed=3"]
    commands = ("collect", "fit-wm", "run", "certify")

    def produce(tag, jobs):
        out = tmp_path / tag
        for cmd in commands:
            extra = ["--set", "world_model.view_mode=flat"] if cmd == "run" else []
            assert main([cmd, *small, *extra, "--jobs", str(jobs),
                         "--set", f"general.out_dir={out}"]) == 0
        return {p.relative_to(out).as_posix(): p.read_bytes()
                for p in sorted(out.rglob("*")) if p.is_file() and p.name != "resolved_config.ini"}

    a, b, c = produce("a", 1), produce("b", 1), produce("c", 8)
    csvs = sorted(k for k in a if k.endswith(".csv"))
    same_rerun = a == b
    same_jobs = a == c
    ok = same_rerun and same_jobs and len(csvs) >= 7
    criterion(12, "determinism", ok,
              f"{len(a)} files ({len(csvs)} CSVs) over {', '.join(commands)}: rerun "
              f"{'identical' if same_rerun else 'DIFFERS'}, --jobs 1 vs 8 "
              f"{'identical' if same_jobs else 'DIFFERS'}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-rA"]))
