"""Value-gap bounds for chunk-level model-based policy optimization, and
exact certification of those bounds on seeded toy instances."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .envs import RandomMdpSpec, make_random_mdp
from .lmdp import (ChunkMdp, LMdp, chunk_actions, exact_value, lift_to_chunk_mdp,
                   policy_divergence, policy_kernel, tv_distance, tv_rows)

MARGIN_TOL = 1e-9
LEMMA_TOL = 1e-12
VISIT_TOL = 1e-15
VISIT_CAP = 20000


@dataclass(frozen=True)
class BoundInputs:
    eps_pi: float = 0.0
    eps_m: float = 0.0
    eps_m_kn: float = 0.0
    gamma: float = 0.99
    k: int = 1
    n: int = 1
    r_max: float = 1.0

    def __post_init__(self):
        for name in ("eps_pi", "eps_m", "eps_m_kn"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")
        _check_gamma(self.gamma)
        if self.k < 1 or self.n < 0:
            raise ValueError("need k >= 1 and n >= 0")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")


def _check_gamma(gamma):
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma = {gamma} must lie strictly inside (0, 1)")


def _scale(gamma, r_max):
    _check_gamma(gamma)
    return 2.0 * r_max / (1.0 - gamma)


def bound_theorem1(x: BoundInputs) -> float:
    """Step-level model error, chunk-level policy, full model rollouts."""
    gk = x.gamma**x.k
    return _scale(x.gamma, x.r_max) * (2 * gk / (1 - gk) * x.eps_pi + 2 * x.eps_pi
                                      + x.k * gk / (1 - gk) * x.eps_m)


def bound_theorem2(x: BoundInputs) -> float:
    """Chunk-level model error, n-chunk branched rollouts."""
    gk = x.gamma**x.k
    return _scale(x.gamma, x.r_max) * (gk ** (x.n + 1) / (1 - gk) * x.eps_pi
                                      + gk**x.n * x.eps_pi + x.n * x.eps_m_kn)


def bound_lemma_a3(eps_pi, eps_m_k, gamma, k, r_max=1.0) -> float:
    gk = gamma**k
    return _scale(gamma, r_max) * (gk / (1 - gk) * eps_pi + eps_pi + gk / (1 - gk) * eps_m_k)


def bound_lemma_a4(pre_eps_pi, post_eps_pi, pre_eps_m, post_eps_m, gamma, k, n,
                   r_max=1.0) -> float:
    gk = gamma**k
    return _scale(gamma, r_max) * (n * post_eps_m + (n + 1) * post_eps_pi
                                   + gk ** (n + 1) * (pre_eps_m + pre_eps_pi) / (1 - gk)
                                   + gk**n * pre_eps_pi)


def recompose_theorem1(x: BoundInputs) -> float:
    """Policy-only term plus the combined term with ``k * eps_m`` as chunk error."""
    return (bound_lemma_a3(x.eps_pi, 0.0, x.gamma, x.k, x.r_max)
            + bound_lemma_a3(x.eps_pi, x.k * x.eps_m, x.gamma, x.k, x.r_max))


def recompose_theorem2(x: BoundInputs) -> float:
    """Pre-branch policy error plus post-branch model error."""
    return (bound_lemma_a4(x.eps_pi, 0.0, 0.0, 0.0, x.gamma, x.k, x.n, x.r_max)
            + bound_lemma_a4(0.0, 0.0, 0.0, x.eps_m_kn, x.gamma, x.k, x.n, x.r_max))


def case_study(gamma=0.99, k=10, n=2, r_max=1.0) -> tuple:
    """Linear coefficients ``(thm1 eps_pi, thm1 eps_m, thm2 eps_pi, thm2 eps_m)``."""
    base = dict(gamma=gamma, k=k, n=n, r_max=r_max)
    return (bound_theorem1(BoundInputs(eps_pi=1.0, **base)),
            bound_theorem1(BoundInputs(eps_m=1.0, **base)),
            bound_theorem2(BoundInputs(eps_pi=1.0, **base)),
            bound_theorem2(BoundInputs(eps_m_kn=1.0, **base)))


# -- exact divergence measurements ------------------------------------------

def data_step_divergence(mdp: LMdp, learned_transition: np.ndarray, data_policy: np.ndarray,
                         k: int, start: np.ndarray | None = None) -> float:
    """``max_t E_{(s,a) ~ D^t} TV(T(.|s,a), T_hat(.|s,a))`` at step granularity.

    ``D^t`` is the exact step-level state-action distribution of the data
    chunk policy, tracked jointly with the chunk in progress. Chunk starts are
    pushed until the start distribution stops changing.
    """
    S, A = mdp.n_states, mdp.n_actions
    C = data_policy.shape[1]
    acts = chunk_actions(np.arange(C), A, k)                     # (C, k)
    tv = tv_rows(mdp.transition, np.asarray(learned_transition, float))  # (S, A)
    sel = [mdp.transition[:, acts[:, i], :] for i in range(k)]   # (S, C, S)
    d = np.asarray(mdp.start_dist if start is None else start, float)
    best = 0.0
    for _ in range(VISIT_CAP):
        x = d[:, None] * data_policy
        for i in range(k):
            best = max(best, float(np.sum(x * tv[:, acts[:, i]])))
            x = np.einsum("sc,sct->tc", x, sel[i])
        d_next = x.sum(axis=1)
        if np.abs(d_next - d).sum() <= VISIT_TOL:
            break
        d = d_next
    return best


def data_chunk_divergence(chunk_mdp, learned_kernel: np.ndarray, data_policy: np.ndarray,
                          start: np.ndarray | None = None) -> float:
    """Chunk-level analogue: ``max_t E_{s ~ D^t, c ~ pi_D} TV(T^k, T_hat^k)``."""
    tv = tv_rows(chunk_mdp.kernel, np.asarray(learned_kernel, float))
    P = policy_kernel(chunk_mdp, data_policy)
    per_state = np.einsum("sc,sc->s", data_policy, tv)
    d = np.asarray(chunk_mdp.start_dist if start is None else start, float)
    best = 0.0
    for _ in range(VISIT_CAP):
        best = max(best, float(d @ per_state))
        d_next = d @ P
        if np.abs(d_next - d).sum() <= VISIT_TOL:
            break
        d = d_next
    return best


def branched_divergence(chunk_mdp, learned_kernel: np.ndarray, data_policy: np.ndarray,
                        policy: np.ndarray, n: int, start: np.ndarray | None = None) -> float:
    """``max_{p, j<n} E_{s ~ d0 P_D^p P_pi^j, c ~ pi} TV(T^k, T_hat^k)``.

    Branch points follow the data policy for ``p`` chunks; the current policy
    then runs ``j`` chunks in the true model.
    """
    if n == 0:
        return 0.0
    tv = tv_rows(chunk_mdp.kernel, np.asarray(learned_kernel, float))
    per_state = np.einsum("sc,sc->s", policy, tv)
    P_D = policy_kernel(chunk_mdp, data_policy)
    P_pi = policy_kernel(chunk_mdp, policy)
    d = np.asarray(chunk_mdp.start_dist if start is None else start, float)
    best = 0.0
    for _ in range(VISIT_CAP):
        e = d
        for _ in range(n):
            best = max(best, float(e @ per_state))
            e = e @ P_pi
        d_next = d @ P_D
        if np.abs(d_next - d).sum() <= VISIT_TOL:
            break
        d = d_next
    return best


def branched_value(chunk_mdp, learned_kernel: np.ndarray, data_policy: np.ndarray,
                   policy: np.ndarray, n: int, instruction: int = 0,
                   start: np.ndarray | None = None, pre_branch: str = "true") -> float:
    """Exact value of n-chunk branched rollouts.

    At chunk time ``t`` the state law is ``d0 P_D^max(t-n, 0) P_hat_pi^min(t, n)``:
    the data policy runs in the pre-branch model, then the current policy runs
    ``n`` chunks in the learned model. Rewards are the current policy's chunk
    rewards. ``pre_branch="learned"`` runs the pre-branch phase in the learned
    model too (not covered by the certified bound).
    """
    g = chunk_mdp.discount
    S = chunk_mdp.n_states
    Th = np.asarray(learned_kernel, float)
    r_pi = np.einsum("sc,sc->s", policy, chunk_mdp.action_reward(instruction))
    P_hat = np.einsum("sc,sct->st", policy, Th)
    if pre_branch == "true":
        P_D = policy_kernel(chunk_mdp, data_policy)
    elif pre_branch == "learned":
        P_D = np.einsum("sc,sct->st", data_policy, Th)
    else:
        raise ValueError(f"unknown pre_branch mode {pre_branch!r}")
    d0 = np.asarray(chunk_mdp.start_dist if start is None else start, float)
    total, d = 0.0, d0
    for t in range(n):
        total += g**t * float(d @ r_pi)
        d = d @ P_hat
    occ = np.linalg.solve((np.eye(S) - g * P_D).T, d0)       # d0 (I - g P_D)^-1
    tail = occ
    for _ in range(n):
        tail = tail @ P_hat
    return total + g**n * float(tail @ r_pi)


# -- reports ----------------------------------------------------------------

@dataclass(frozen=True)
class GapReport:
    instance_id: int
    seed: int
    scheme: str
    eps_pi: float
    eps_m: float
    empirical_gap: float
    bound_value: float

    @property
    def margin(self) -> float:
        return self.bound_value - self.empirical_gap

    def row(self) -> dict:
        out = asdict(self)
        out["margin"] = self.margin
        return out


def empirical_value_gap(env: LMdp, model, policy: np.ndarray, data_policy: np.ndarray,
                        scheme, instruction: int = 0, step_transition: np.ndarray | None = None,
                        instance_id: int = 0, seed: int = 0,
                        start: np.ndarray | None = None, k: int | None = None) -> GapReport:
    """Exact ``|V - V_hat|`` for ``policy`` and the matching theorem bound.

    ``model`` supplies the learned chunk kernel (a ChunkWorldModel or an
    array); its chunk rewards are taken from the true lifted MDP. ``scheme``
    is a RolloutPlan-like object with ``scheme`` in {"full", "branched"} and
    ``n``. For the full-horizon scheme a step-level learned kernel
    (``step_transition``) gives the step-level model error; otherwise the
    chunk-level data error is used in place of ``k * eps_m``. Pass ``k`` when
    ``model`` is a bare array.
    """
    k = getattr(model, "k", k)
    if k is None:
        raise ValueError("chunk size unknown: pass k with a bare kernel array")
    cm = lift_to_chunk_mdp(env, k)
    Th = np.asarray(getattr(model, "kernel", model), float)
    d0 = np.asarray(env.start_dist if start is None else start, float)
    v_true = float(d0 @ exact_value(cm, policy, instruction))
    eps_pi = policy_divergence(data_policy, policy).value
    kind = getattr(scheme, "scheme", scheme)
    if kind == "full":
        v_hat = float(d0 @ exact_value(cm.with_transition(Th), policy, instruction))
        if step_transition is not None:
            eps_m = data_step_divergence(env, step_transition, data_policy, k, d0)
            bound = bound_theorem1(BoundInputs(eps_pi, min(eps_m, 1.0), 0.0, env.gamma, k))
        else:
            eps_m = data_chunk_divergence(cm, Th, data_policy, d0)
            bound = (bound_lemma_a3(eps_pi, 0.0, env.gamma, k)
                     + bound_lemma_a3(eps_pi, eps_m, env.gamma, k))
    elif kind == "branched":
        n = scheme.n
        v_hat = branched_value(cm, Th, data_policy, policy, n, instruction, d0)
        eps_m = branched_divergence(cm, Th, data_policy, policy, n, d0)
        bound = bound_theorem2(BoundInputs(eps_pi, 0.0, min(eps_m, 1.0), env.gamma, k, n))
    else:
        raise ValueError(f"unknown scheme {kind!r}")
    return GapReport(instance_id, seed, f"{kind}" if kind == "full" else f"branched-{scheme.n}",
                     eps_pi, eps_m, abs(v_true - v_hat), bound)


# -- certification sweeps -----------------------------------------------------

@dataclass(frozen=True)
class _Scheme:
    scheme: str
    n: int = 0


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def theorem_instance(seed: int, max_states: int = 8, sign: float = 1.0) -> list:
    """One seeded (MDP, corrupted model, policy pair) instance; two reports.

    ``sign=-1`` flips the bound sign (a test hook for the failure path).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E0]))
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, 4))
    k = int(rng.integers(1, 4))
    gamma = float(rng.choice([0.5, 0.7, 0.9, 0.95]))
    alpha = float(rng.choice([0.1, 0.5, 1.0]))
    mdp = make_random_mdp(RandomMdpSpec(S, A, 1, 0.3, alpha, int(rng.integers(2**32)), gamma))
    start = rng.dirichlet(np.ones(S)) if rng.random() < 0.5 else mdp.start_dist
    mdp = LMdp(mdp.transition, mdp.reward, gamma, start)
    C = A**k
    pi_d = _softmax(rng.normal(0.0, 1.5, (S, C)))
    pi = _softmax(np.log(pi_d) + rng.normal(0.0, float(rng.choice([0.0, 0.3, 1.0, 3.0])), (S, C)))
    eta = float(rng.uniform(0.0, 0.6))
    mask_frac = float(rng.choice([1.0, 0.5]))

    # step-level corruption for the full-horizon scheme
    adv = np.zeros((S, A, S))
    adv[np.arange(S)[:, None], np.arange(A)[None, :], rng.integers(0, S, (S, A))] = 1.0
    mask = rng.random((S, A)) < mask_frac
    T_hat = mdp.transition.copy()
    T_hat[mask] = (1 - eta) * T_hat[mask] + eta * adv[mask]
    cm_hat = lift_to_chunk_mdp(mdp.with_transition(T_hat), k)
    full = empirical_value_gap(mdp, _Kernel(cm_hat.chunk_transition, k), pi, pi_d,
                               _Scheme("full"), 0, T_hat, seed, seed, start)

    # chunk-level corruption for the branched scheme
    cm = lift_to_chunk_mdp(mdp, k)
    adv_k = np.zeros((S, C, S))
    adv_k[np.arange(S)[:, None], np.arange(C)[None, :], rng.integers(0, S, (S, C))] = 1.0
    mask_k = rng.random((S, C)) < mask_frac
    Tk_hat = cm.chunk_transition.copy()
    Tk_hat[mask_k] = (1 - eta) * Tk_hat[mask_k] + eta * adv_k[mask_k]
    n = int(rng.integers(1, 5))
    br = empirical_value_gap(mdp, _Kernel(Tk_hat, k), pi, pi_d, _Scheme("branched", n),
                             0, None, seed, seed, start)
    if sign != 1.0:
        full = GapReport(**{**asdict(full), "bound_value": sign * full.bound_value})
        br = GapReport(**{**asdict(br), "bound_value": sign * br.bound_value})
    return [full, br]


@dataclass(frozen=True)
class _Kernel:
    kernel: np.ndarray
    k: int


def certify_theorems(n_instances: int = 500, seed: int = 0, max_states: int = 8,
                     jobs: int = 1, sign: float = 1.0) -> list:
    """GapReports for ``n_instances`` seeded instances (two schemes each)."""
    seeds = [seed * 1_000_003 + i for i in range(n_instances)]

    def one(s):
        return theorem_instance(s, max_states, sign)

    if jobs <= 1:
        chunks = [one(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(one, seeds))
    reports = []
    for i, pair in enumerate(chunks):
        for rep in pair:
            reports.append(GapReport(**{**asdict(rep), "instance_id": i}))
    return reports


@dataclass(frozen=True)
class LemmaRow:
    instance_id: int
    seed: int
    lemma: str
    margin: float


def lemma_instance(seed: int, sizes=(2, 16), horizon: int = 20) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA12]))
    lo, hi = sizes
    rows = []
    # joint TV
    nx, ny = rng.integers(lo, hi + 1, 2)
    a = float(rng.choice([0.2, 1.0, 5.0]))
    px, qx = rng.dirichlet(np.full(nx, a)), rng.dirichlet(np.full(nx, a))
    if rng.random() < 0.2:
        qx = px.copy()
    py = rng.dirichlet(np.full(ny, a), size=nx)
    qy = py.copy() if rng.random() < 0.2 else rng.dirichlet(np.full(ny, a), size=nx)
    joint_tv = tv_distance((px[:, None] * py).ravel(), (qx[:, None] * qy).ravel())
    bound = tv_distance(px, qx) + float(tv_rows(py, qy).max())
    rows.append(LemmaRow(0, seed, "joint-tv", bound - joint_tv))
    # rollout TV under a shared start
    S = int(rng.integers(lo, hi + 1))
    P1 = rng.dirichlet(np.full(S, a), size=S)
    w = float(rng.uniform(0, 1))
    P2 = (1 - w) * P1 + w * rng.dirichlet(np.full(S, a), size=S)
    d0 = rng.dirichlet(np.ones(S))
    tv = tv_rows(P1, P2)
    d1, d2 = [d0], [d0]
    for _ in range(horizon):
        d1.append(d1[-1] @ P1)
        d2.append(d2[-1] @ P2)
    delta = max(float(d @ tv) for d in d1[:horizon])
    worst = min(t * delta - tv_distance(d1[t], d2[t]) for t in range(horizon + 1))
    rows.append(LemmaRow(0, seed, "rollout-tv", worst))
    # closed-form recomposition
    x = BoundInputs(float(rng.uniform()), float(rng.uniform()), float(rng.uniform()),
                    float(rng.uniform(0.05, 0.995)), int(rng.integers(1, 21)),
                    int(rng.integers(0, 21)), float(rng.uniform(0.1, 5.0)))
    for name, lhs, rhs in (("recompose-thm1", bound_theorem1(x), recompose_theorem1(x)),
                           ("recompose-thm2", bound_theorem2(x), recompose_theorem2(x))):
        rel = abs(lhs - rhs) / max(1.0, abs(lhs))
        rows.append(LemmaRow(0, seed, name, LEMMA_TOL - rel))
    return rows


def certify_lemmas(seed_count: int = 500, sizes=(2, 16), horizon: int = 20,
                   seed: int = 0) -> list:
    """Lemma margins per instance. Recomposition rows report ``1e-12 - rel. error``."""
    out = []
    for i in range(seed_count):
        for r in lemma_instance(seed * 1_000_003 + i, sizes, horizon):
            out.append(LemmaRow(i, r.seed, r.lemma, r.margin))
    return out


def min_margin(rows) -> tuple:
    """``(min margin, row)`` over reports or lemma rows."""
    worst = min(rows, key=lambda r: r.margin)
    return worst.margin, worst


# -- CSV output ---------------------------------------------------------------

def _fmt(v):
    return format(v, ".17g") if isinstance(v, float) else str(v)


def write_gap_csv(reports, path) -> None:
    cols = ["instance_id", "seed", "scheme", "eps_pi", "eps_m", "empirical_gap", "bound", "margin"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in reports:
            w.writerow([_fmt(v) for v in (r.instance_id, r.seed, r.scheme, r.eps_pi, r.eps_m,
                                          r.empirical_gap, r.bound_value, r.margin)])
        if reports:
            m, worst = min_margin(reports)
            fh.write(f"# min_margin,{_fmt(m)},instance_id,{worst.instance_id},scheme,{worst.scheme}\n")


def write_lemma_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "seed", "lemma", "margin"])
        for r in rows:
            w.writerow([r.instance_id, r.seed, r.lemma, _fmt(r.margin)])
        if rows:
            m, worst = min_margin(rows)
            fh.write(f"# min_margin,{_fmt(m)},instance_id,{worst.instance_id},lemma,{worst.lemma}\n")


def write_case_study_csv(coeffs, params, path) -> None:
    names = ["thm1_eps_pi", "thm1_eps_m", "thm2_eps_pi", "thm2_eps_m"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "k", "n", "r_max"] + names)
        w.writerow([_fmt(float(p)) if isinstance(p, float) else p for p in params]
                   + [_fmt(float(c)) for c in coeffs])
