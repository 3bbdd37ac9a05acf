"""Command-line runner: ``collect``, ``fit-wm``, ``run`` and ``certify``.

Exit codes: 0 success, 2 configuration error, 3 certification violation,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import theory
from .config import Config, ConfigError, load_config
from .envs import RandomMdpSpec, make_random_mdp, make_twoview_gridworld
from .lmdp import lift_to_chunk_mdp, tv_rows
from .policy import FlowNoisePolicy, SoftmaxChunkPolicy
from .rl import (BufferFormatError, GaeConfig, RolloutPlan, RunConfig, collect_buffer,
                 load_buffer, save_buffer, vla_mbpo_run, write_curve_csv, _subseed)
from .world_model import fit_chunk_model, save_model, wrist_successor_tv

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_IO = 0, 2, 3, 4


class Violation(RuntimeError):
    pass


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def build_env(cfg: Config):
    e = cfg["environment"]
    if e["kind"] == "gridworld":
        if any(not 0 <= g < e["width"] * e["height"] for g in e["goals"]):
            raise ConfigError("environment.goals: goal cell outside the grid")
        return make_twoview_gridworld(e["width"], e["height"], list(e["goals"]), e["slip"],
                                      e["gamma"])
    return make_random_mdp(RandomMdpSpec(e["n_states"], e["n_actions"], e["n_instructions"],
                                         e["reward_sparsity"], e["dirichlet_alpha"],
                                         e["env_seed"], e["gamma"]))


def build_policy(cfg: Config, mdp):
    p, k = cfg["policy"], cfg["world_model"]["k"]
    if p["kind"] == "softmax":
        return SoftmaxChunkPolicy.uniform(mdp.n_states, mdp.n_instructions, mdp.n_actions, k,
                                          p["temperature"])
    return FlowNoisePolicy(mdp.n_states, mdp.n_instructions, k, 1, p["denoise_steps"],
                           p["noise_level"], bins=mdp.n_actions)


def run_config(cfg: Config, scheme=None, n=None, sample_size=None) -> RunConfig:
    wm, ro, ppo, run = cfg["world_model"], cfg["rollout"], cfg["ppo"], cfg["run"]
    scheme = scheme or ro["scheme"]
    n = n or ro["n"]
    plan = RolloutPlan.for_sample_size(scheme, n, ro["max_chunks"],
                                       sample_size or ro["sample_size"])
    gae = GaeConfig(ppo["gamma"], ppo["lam"], wm["k"], ppo["clip_epsilon"],
                    ppo["updates_per_batch"], ppo["advantage_normalization"])
    return RunConfig(seed=cfg.seed, k=wm["k"], buffer_episodes=cfg["collect"]["episodes"],
                     episode_chunks=cfg["collect"]["max_chunks"],
                     smoothing_alpha=wm["smoothing_alpha"],
                     view_mode="flat" if wm["view_mode"] == "both" else wm["view_mode"],
                     world_model=wm["kind"], corruption_eta=wm["corruption_eta"],
                     corruption_level=wm["corruption_level"], plan=plan, gae=gae,
                     iterations=run["iterations"], eval_episodes=run["eval_episodes"],
                     policy_lr=ppo["policy_lr"], value_lr=ppo["value_lr"],
                     pin_absorbing=ppo["pin_absorbing"], jobs=cfg.jobs,
                     record_wallclock=cfg["general"]["record_wallclock"])


def _check_env_policy(cfg, env):
    mdp = getattr(env, "mdp", env)
    if abs(cfg["ppo"]["gamma"] - mdp.gamma) > 0:
        raise ConfigError("ppo.gamma must equal environment.gamma")
    k = cfg["world_model"]["k"]
    if mdp.n_actions**k > 2**16:
        raise ConfigError(f"world_model.k: {mdp.n_actions}^{k} chunk actions is too many "
                          "for the tabular model")


def _out(cfg: Config) -> Path:
    out = Path(cfg["general"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: Config, out: Path) -> None:
    (out / "resolved_config.ini").write_text(cfg.resolved_text())


def _buffer_path(cfg: Config, out: Path, given=None) -> Path:
    if given:
        return Path(given)
    if cfg["collect"]["buffer"]:
        return Path(cfg["collect"]["buffer"])
    return out / "buffer.bin"


# -- commands -----------------------------------------------------------------

def cmd_collect(cfg: Config) -> int:
    env = build_env(cfg)
    _check_env_policy(cfg, env)
    mdp = getattr(env, "mdp", env)
    policy = build_policy(cfg, mdp)
    out = _out(cfg)
    k = cfg["world_model"]["k"]
    c = cfg["collect"]
    buf = collect_buffer(mdp, policy, c["episodes"], c["max_chunks"], _subseed(cfg.seed, 1),
                         k, 1, mdp.n_actions, cfg.jobs)
    path = _buffer_path(cfg, out)
    save_buffer(buf, path)
    successes = {e.episode for e in buf.entries if e.success}
    rate = len(successes) / c["episodes"]
    _write_csv(out / "collect_report.csv", ["episodes", "entries", "success_rate"],
               [(len(buf.episodes), len(buf), float(rate))])
    _snapshot(cfg, out)
    print(f"collected {len(buf.episodes)} episodes ({len(buf)} chunks), "
          f"success rate {rate:.3f} -> {path}")
    return EXIT_OK


def cmd_fit_wm(cfg: Config, buffer_path=None) -> int:
    env = build_env(cfg)
    _check_env_policy(cfg, env)
    mdp = getattr(env, "mdp", env)
    out = _out(cfg)
    path = _buffer_path(cfg, out, buffer_path)
    buf = load_buffer(path)
    if not buf.entries:
        raise ConfigError(f"buffer {path} is empty")
    k = cfg["world_model"]["k"]
    if buf.k != k:
        raise ConfigError(f"world_model.k = {k} but buffer {path} has k = {buf.k}")
    cm = lift_to_chunk_mdp(mdp, k)
    wrist = getattr(env, "wrist_of_state", None)
    mode = cfg["world_model"]["view_mode"]
    modes = ["flat", "interleaved"] if mode == "both" else [mode]
    if wrist is None and "interleaved" in modes:
        raise ConfigError("world_model.view_mode: interleaved needs the two-view gridworld")
    rows = []
    for m in modes:
        model = fit_chunk_model(buf, k, mdp.n_states, cm.n_actions,
                                cfg["world_model"]["smoothing_alpha"], m,
                                mdp.n_instructions, mdp.gamma, wrist)
        name = "world_model.ckpt" if len(modes) == 1 else f"world_model_{m}.ckpt"
        save_model(model, out / name)
        tv = tv_rows(cm.chunk_transition, model.transition_est)[model.support]
        wtv = wrist_successor_tv(model, cm.chunk_transition, wrist) if wrist is not None else float("nan")
        rows.append((m, int(model.support.sum()), float(model.support.mean()),
                     float(tv.mean()), float(tv.max()), float(wtv)))
        print(f"{m}: {rows[-1][1]} supported pairs, on-support TV mean {rows[-1][3]:.4f}")
    _write_csv(out / "fit_report.csv", ["view_mode", "support_pairs", "coverage",
                                        "on_support_tv_mean", "on_support_tv_max",
                                        "wrist_successor_tv"], rows)
    _snapshot(cfg, out)
    return EXIT_OK


def cmd_run(cfg: Config) -> int:
    env = build_env(cfg)
    _check_env_policy(cfg, env)
    mdp = getattr(env, "mdp", env)
    out = _out(cfg)
    _snapshot(cfg, out)
    buffer = None
    if cfg["collect"]["buffer"]:
        buffer = load_buffer(cfg["collect"]["buffer"])
    ro = cfg["rollout"]
    variants = []
    for s in ro["sweep_schemes"]:
        if s == "full":
            variants.append(("scheme-full", dict(scheme="full")))
        else:
            variants.append((f"scheme-branched-{s}", dict(scheme="branched", n=int(s))))
    for size in ro["sweep_sample_sizes"]:
        variants.append((f"samples-{size}", dict(sample_size=size)))
    if not variants:
        variants = [("", {})]
    summary = []
    for name, kw in variants:
        rc = run_config(cfg, **kw)
        target = out / name if name else out
        res = vla_mbpo_run(env, build_policy(cfg, mdp), rc, target, buffer)
        _write_csv(target / "exact_returns.csv", ["iteration", "exact_return"],
                   [(-1, res.initial_exact_return)]
                   + [(i, v) for i, v in enumerate(res.exact_returns)])
        summary.append((name or "default", res.initial_exact_return, res.exact_returns[-1],
                        res.curve[-1].eval_success_rate))
        print(f"{name or 'run'}: exact return {res.initial_exact_return:.3f} -> "
              f"{res.exact_returns[-1]:.3f}")
    _write_csv(out / "run_summary.csv", ["variant", "initial_exact_return",
                                         "final_exact_return", "final_eval_success_rate"],
               summary)
    return EXIT_OK


def cmd_certify(cfg: Config) -> int:
    c = cfg["certify"]
    out = _out(cfg)
    _snapshot(cfg, out)
    coeffs = theory.case_study(c["case_gamma"], c["case_k"], c["case_n"], c["case_r_max"])
    theory.write_case_study_csv(coeffs, (c["case_gamma"], c["case_k"], c["case_n"],
                                         c["case_r_max"]), out / "case_study.csv")
    print("case study coefficients: " + ", ".join(f"{x:.1f}" for x in coeffs))

    lemmas = theory.certify_lemmas(c["lemma_instances"], (2, c["lemma_max_states"]),
                                   c["horizon"], cfg.seed)
    theory.write_lemma_csv(lemmas, out / "lemmas.csv")
    reports = theory.certify_theorems(c["instances"], cfg.seed, c["max_states"], cfg.jobs,
                                      c["bound_sign"])
    theory.write_gap_csv(reports, out / "theorems.csv")

    lm, lw = theory.min_margin(lemmas)
    tm, tw = theory.min_margin(reports)
    print(f"lemmas: min margin {lm:.3e} ({lw.lemma}, instance {lw.instance_id})")
    print(f"theorems: min margin {tm:.3e} ({tw.scheme}, instance {tw.instance_id})")
    bad_l = [r for r in lemmas if r.margin < -theory.LEMMA_TOL]
    bad_t = [r for r in reports if r.margin < -theory.MARGIN_TOL]
    if bad_l or bad_t:
        with open(out / "violations.txt", "w") as fh:
            for r in bad_l:
                fh.write(f"lemma {r.lemma} instance {r.instance_id} seed {r.seed} "
                         f"margin {_fmt(r.margin)} replay: lemma_instance({r.seed}, "
                         f"sizes=(2, {c['lemma_max_states']}), horizon={c['horizon']})\n")
            for r in bad_t:
                fh.write(f"theorem scheme {r.scheme} instance {r.instance_id} seed {r.seed} "
                         f"eps_pi {_fmt(r.eps_pi)} eps_m {_fmt(r.eps_m)} "
                         f"gap {_fmt(r.empirical_gap)} bound {_fmt(r.bound_value)} "
                         f"margin {_fmt(r.margin)} replay: "
                         f"theorem_instance({r.seed}, max_states={c['max_states']})\n")
        raise Violation(f"{len(bad_l)} lemma and {len(bad_t)} theorem violations; "
                        f"see {out / 'violations.txt'}")
    return EXIT_OK


COMMANDS = {"collect": cmd_collect, "fit-wm": cmd_fit_wm, "run": cmd_run,
            "certify": cmd_certify}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chunk-mbpo",
                                 description="Chunk-level model-based policy optimization lab.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
        if name == "fit-wm":
            p.add_argument("--buffer", help="replay-buffer file (default: <out_dir>/buffer.bin)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config, args.set)
        cfg.jobs = args.jobs
        if args.command == "fit-wm":
            return cmd_fit_wm(cfg, args.buffer)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Violation as exc:
        print(f"certification violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (OSError, BufferFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
