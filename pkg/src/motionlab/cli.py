"""Command-line entry points for the full pipeline.

Subcommands: `gen-corpus` (scripted training windows), `train` (planner /
policy / pose-to-rotation nets), `adapt` (test-time adaptation with ablation
flags), `eval` (metric sweeps, scaling series, guidance cost comparison), and
`report` (re-render figures from a finished run).

Exit codes: 0 success, 2 configuration or IO problems, 3 numerical
divergence. Every command writes its artifacts under the output directory and
finishes with a `manifest.json` of content hashes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import pickle
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evalkit as ek
from . import p2r as p2rmod
from . import report as reportmod
from .autodiff import NumericalFault
from .config import STYLE_TOKENS, load_config, worker_threads
from .controller import PolicyFault, init_policy_nets, pretrain
from .corpus import Corpus, build_corpus
from .diffusion import cosine_schedule, init_denoiser, train_planner
from .guidance import GuidanceConfig, GuidanceTerm
from .motionrep import Standardizer
from .nav import build_walkable_map
from .nets import raw
from .params import AdamState, ParamSet
from .rng import RngStream
from .tta import (
    NetworkTriple,
    PlannerHandle,
    TtaConfig,
    TtaPool,
    TtaTask,
    tta_epoch,
)
from .world import ObstacleField

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# -- shared plumbing ---------------------------------------------------------


def _prepare(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("run", {})["seed"] = args.seed
    if getattr(args, "envs", None) is not None:
        overrides.setdefault("run", {})["envs"] = args.envs
    if getattr(args, "out", None) is not None:
        overrides.setdefault("run", {})["out"] = args.out
    try:
        cfg = load_config(args.config, overrides)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load config: {e}")
    out = Path(cfg["run"]["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {out}: {e}")
    return cfg, out


def write_manifest(out: Path) -> Path:
    """Hash every artifact under the output directory."""
    entries = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries[p.relative_to(out).as_posix()] = hashlib.sha256(
                p.read_bytes()
            ).hexdigest()
    path = out / "manifest.json"
    with open(path, "w") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
    return path


def _write_loss_csv(path, losses, column="loss"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", column])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"missing {what}: {p}")
    return p


def _check_shapes(loaded: ParamSet, reference: ParamSet, what: str):
    """Checkpoint layout must match the configured architecture."""
    got = {n: loaded[n].data.shape for n in loaded.names()}
    want = {n: reference[n].data.shape for n in reference.names()}
    if got != want:
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        wrong = sorted(n for n in set(got) & set(want) if got[n] != want[n])
        detail = "; ".join(
            s for s in (
                f"missing {missing}" if missing else "",
                f"unexpected {extra}" if extra else "",
                f"shape mismatch {[(n, got[n], want[n]) for n in wrong]}" if wrong else "",
            ) if s
        )
        raise CliError(f"{what} checkpoint does not match configuration: {detail}")


def save_planner_checkpoint(out: Path, params: ParamSet, stats: Standardizer):
    params.save(out / "planner.pset")
    np.savez(out / "planner_stats.npz", stats=stats.to_arrays())


def load_planner_handle(pset_path, stats_path, cfg, gcfg: GuidanceConfig) -> PlannerHandle:
    params = ParamSet.load(_require_file(pset_path, "planner checkpoint"))
    _check_shapes(params, init_denoiser(RngStream(0), cfg["planner"]), "planner")
    with np.load(_require_file(stats_path, "planner statistics")) as z:
        stats = Standardizer.from_arrays(z["stats"])
    sched = cosine_schedule(cfg["planner"]["diffusion_steps"])
    return PlannerHandle(params, sched, stats, cfg["planner"], gcfg)


def load_policy(pset_path, cfg) -> ParamSet:
    params = ParamSet.load(_require_file(pset_path, "policy checkpoint"))
    _check_shapes(params, init_policy_nets(RngStream(0), cfg["controller"]), "policy")
    return params


def _guidance_config(cfg, mode_flag: str | None) -> GuidanceConfig:
    g = dict(cfg["guidance"])
    if mode_flag == "latent":
        g["mode"] = "latent-space"
    elif mode_flag == "signal":
        g["mode"] = "signal-space"
    return GuidanceConfig(iterations=g["iterations"], step_size=g["step_size"],
                          mode=g["mode"], grid_extent=g["grid_extent"],
                          grid_n=g["grid_n"])


def _build_task(kind: str, scale: float, cfg, guided: bool) -> TtaTask:
    """Scene construction for the named adaptation/eval task."""
    half = max(6.0, 4.0 * scale)
    target = np.array([2.5 * scale, 0.0])
    if kind == "goal":
        field = ObstacleField.empty(half)
        walkable = None
        obstacle_weight = 0.0
    elif kind == "obstacle":
        box = np.array([[1.25 * scale, 0.0, 0.3 * scale, 0.3 * scale]])
        field = ObstacleField(box, np.array([-half, -half, half, half]))
        walkable = build_walkable_map(field, cfg["nav"]["resolution"] * max(1.0, scale))
        obstacle_weight = 1.0 if guided else 0.0
    else:
        raise CliError(f"unknown task kind: {kind}")
    return TtaTask(
        style=0,
        target_xy=target,
        field=field,
        walkable=walkable,
        obstacle_weight=obstacle_weight,
        target_weight=1.0 if guided else 0.0,
        intermediate_radius=cfg["nav"]["intermediate_radius"],
    )


# -- commands ----------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg, out = _prepare(args)
    corpus = build_corpus(cfg, cfg["run"]["seed"])
    try:
        corpus.save(out / "corpus.npz")
    except OSError as e:
        raise CliError(f"cannot write corpus: {e}")
    counts = {STYLE_TOKENS[s]: int(n) for s, n in
              zip(*np.unique(corpus.style, return_counts=True))}
    print(f"corpus: {len(corpus)} windows -> {out / 'corpus.npz'}")
    for name, n in counts.items():
        print(f"  {name:<10} {n:>6}  ({n / len(corpus):.3f})")
    write_manifest(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    seed = cfg["run"]["seed"]

    if args.component == "planner":
        corpus_path = args.corpus or out / "corpus.npz"
        try:
            corpus = Corpus.load(_require_file(corpus_path, "corpus"))
        except (OSError, KeyError, ValueError) as e:
            raise CliError(f"cannot read corpus {corpus_path}: {e}")
        params, _, losses = train_planner(
            corpus, cfg, seed, steps=args.steps,
            progress=lambda i, l: print(f"planner step {i}: loss {l:.4f}"),
        )
        if not np.all(np.isfinite(losses)) or losses[-1] > 1e6:
            raise CliError("planner training diverged", EXIT_DIVERGED)
        save_planner_checkpoint(out, params, corpus.stats)
        _write_loss_csv(out / "planner_losses.csv", losses)
        print(f"planner: final loss {losses[-1]:.6f} -> {out / 'planner.pset'}")

    elif args.component == "policy":
        try:
            params, logs = pretrain(
                cfg, seed,
                progress=lambda tag, i, v: print(f"policy {tag} {i}: {v:.4f}"),
            )
        except PolicyFault as e:
            raise CliError(f"policy pretraining diverged: {e}", EXIT_DIVERGED)
        params.save(out / "policy.pset")
        _write_loss_csv(out / "policy_bc_losses.csv", logs["bc_losses"])
        _write_loss_csv(out / "policy_ppo_rewards.csv", logs["ppo_rewards"],
                        column="reward")
        print(f"policy: final reward {logs['ppo_rewards'][-1]:.4f} "
              f"-> {out / 'policy.pset'}")

    elif args.component == "p2r":
        cfg_p2r = cfg["p2r"]
        X, Phi, R6 = p2rmod.build_dataset(RngStream(seed), cfg_p2r["dataset"])
        params, losses = p2rmod.train_twistnet(X, Phi, R6, cfg_p2r, seed)
        if not np.all(np.isfinite(losses)):
            raise CliError("twist-network training diverged", EXIT_DIVERGED)
        params.save(out / "p2r.pset")
        _write_loss_csv(out / "p2r_losses.csv", losses)
        print(f"p2r: final loss {losses[-1]:.6f} -> {out / 'p2r.pset'}")

    write_manifest(out)
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg, out = _prepare(args)
    seed = cfg["run"]["seed"]
    n_envs = cfg["run"]["envs"]

    tcfg = TtaConfig.from_config(cfg)
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.no_cf:
        tcfg.lambda_cf = 0.0
    if args.no_robust:
        tcfg.lambda_robust = 0.0

    gcfg = _guidance_config(cfg, args.guidance)
    planner = load_planner_handle(args.planner, args.planner_stats
                                  or Path(args.planner).with_name("planner_stats.npz"),
                                  cfg, gcfg)
    policy = load_policy(args.policy, cfg)
    p2r = None
    if args.p2r:
        p2r = ParamSet.load(_require_file(args.p2r, "pose-to-rotation checkpoint"))
        _check_shapes(p2r, p2rmod.init_twistnet(RngStream(0), cfg["p2r"]), "p2r")

    task = _build_task(args.task, args.scale, cfg, guided=args.guidance != "none")

    state_path = out / "adapt_state.pkl"
    if args.resume:
        if not state_path.is_file():
            raise CliError(f"no checkpoint to resume from at {state_path}")
        with open(state_path, "rb") as f:
            state = pickle.load(f)
        pool, triple, adam, rng = (state["pool"], state["triple"],
                                   state["adam"], state["rng"])
        history, start_epoch = state["history"], state["epoch"]
        print(f"resuming at epoch {start_epoch}")
    else:
        pool = TtaPool(n_envs, task, cfg, seed=seed)
        triple = NetworkTriple.from_pretrained(policy, tcfg.alpha)
        adam = AdamState(lr=tcfg.learning_rate)
        rng = RngStream(seed)
        history, start_epoch = [], 0

    for epoch in range(start_epoch, tcfg.epochs):
        metrics = tta_epoch(pool, planner, triple, adam, tcfg, cfg, epoch, rng,
                            p2r=raw(p2r) if p2r is not None else None)
        if not np.isfinite(metrics["policy_loss"]) or not np.isfinite(
                metrics["value_loss"]):
            raise CliError("adaptation diverged (non-finite loss)", EXIT_DIVERGED)
        history.append(metrics)
        if (epoch + 1) % args.checkpoint_every == 0 or epoch + 1 == tcfg.epochs:
            with open(state_path, "wb") as f:
                pickle.dump({"pool": pool, "triple": triple, "adam": adam,
                             "rng": rng, "history": history,
                             "epoch": epoch + 1}, f)
        if (epoch + 1) % 10 == 0:
            print(f"epoch {epoch + 1}: tracking "
                  f"{metrics['mean_tracking_error']:.3f} "
                  f"exec {metrics['exec_rate']:.3f}")

    triple.online.save(out / "adapted.pset")
    triple.target.save(out / "adapted_target.pset")
    reportmod.write_history_csv(out / "history.csv", history)
    reportmod.plot_history(history, out / "adaptation.png")
    write_manifest(out)
    print(f"adapted checkpoint -> {out / 'adapted.pset'}")
    return EXIT_OK


def _eval_episode(stack, scale, cfg, seed):
    rng = RngStream(seed)
    plan = ek.goal_reach_plan(rng, scale, cfg)
    return ek.run_sequence(plan, stack, seed=seed)


def cmd_eval(args) -> int:
    cfg, out = _prepare(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    trials = args.trials if args.trials is not None else cfg["eval"]["trials"]
    scales = [float(s) for s in args.scales.split(",")]

    gcfg = _guidance_config(cfg, args.guidance)
    planner = load_planner_handle(args.planner, args.planner_stats
                                  or Path(args.planner).with_name("planner_stats.npz"),
                                  cfg, gcfg)
    policy = load_policy(args.policy, cfg)
    task = _build_task(args.task, scales[0], cfg, guided=args.guidance != "none")
    stack = ek.Stack(planner=planner, policy_raw=raw(policy), cfg=cfg,
                     field=task.field, walkable=task.walkable)

    reports = {}
    per_scale_success = {sc: [] for sc in scales}
    workers = worker_threads()
    for scale in scales:
        for seed in seeds:
            episode_seeds = [seed * 1_000_003 + 7919 * t for t in range(trials)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                traces = list(pool.map(
                    lambda s: _eval_episode(stack, scale, cfg, s), episode_seeds))
            rep = ek.aggregate(traces, cfg["eval"])
            reports[f"scale{scale:g}-seed{seed}"] = rep
            per_scale_success[scale].append(rep.success_rate)
        reports[f"scale{scale:g}-aggregate"] = ek.mean_reports(
            [reports[f"scale{scale:g}-seed{s}"] for s in seeds])

    scaling = None
    if len(scales) > 1:
        adapted = [float(np.mean(per_scale_success[sc])) for sc in scales]
        scaling = (scales, adapted, adapted)
        with open(out / "scaling.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scale", "success_rate"])
            for sc, v in zip(scales, adapted):
                w.writerow([sc, repr(v)])

    cost = None
    if args.cost_windows > 0:
        terms = [GuidanceTerm("Pos", 1.0, target=np.array([1.0, 0.0]), joint=0)]
        cost = {
            mode: ek.measure_guidance_cost(planner, terms, mode,
                                           args.cost_windows, seed=seeds[0])
            for mode in ("signal-space", "latent-space")
        }
        cost["speed_ratio"] = cost["latent-space"]["seconds"] / cost["signal-space"]["seconds"]
        cost["memory_ratio"] = cost["signal-space"]["peak_bytes"] / cost["latent-space"]["peak_bytes"]
        with open(out / "cost.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mode", "seconds", "peak_bytes", "windows"])
            for mode in ("signal-space", "latent-space"):
                c = cost[mode]
                w.writerow([mode, repr(c["seconds"]), c["peak_bytes"], c["windows"]])
            w.writerow(["speed_ratio", repr(cost["speed_ratio"]), "", ""])
            w.writerow(["memory_ratio", repr(cost["memory_ratio"]), "", ""])

    extra = {"seeds": args.seeds, "trials": trials, "task": args.task}
    if cost:
        extra["speed_ratio"] = cost["speed_ratio"]
        extra["memory_ratio"] = cost["memory_ratio"]
    reportmod.write_report(out, reports, scaling=scaling, extra=extra)
    write_manifest(out)
    for label, rep in reports.items():
        print(f"{label}: success {rep.success_rate:.3f} "
              f"exec {rep.execution_rate:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    history_csv = run / "history.csv"
    if not history_csv.is_file():
        raise CliError(f"no history.csv under {run}")
    history = []
    with open(history_csv, newline="") as f:
        for row in csv.DictReader(f):
            history.append({k: float(v) for k, v in row.items() if k != "epoch"})
    reportmod.plot_history(history, run / "adaptation.png")
    print(f"figures rendered under {run}")
    write_manifest(run)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionlab",
        description="Diffusion planning, physics tracking, and test-time "
                    "adaptation at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-corpus", help="generate the scripted motion corpus")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train one pipeline component")
    common(p)
    p.add_argument("component", choices=["planner", "policy", "p2r"])
    p.add_argument("--corpus", default=None, help="corpus file (planner)")
    p.add_argument("--steps", type=int, default=None,
                   help="override planner training steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="test-time adaptation run")
    common(p)
    p.add_argument("--task", choices=["goal", "obstacle"], default="goal")
    p.add_argument("--envs", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--guidance", choices=["signal", "latent", "none"],
                   default="signal")
    p.add_argument("--no-cf", action="store_true",
                   help="drop the forgetting-control loss")
    p.add_argument("--no-robust", action="store_true",
                   help="drop the plan-consistency loss")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--planner", required=True)
    p.add_argument("--planner-stats", default=None)
    p.add_argument("--policy", required=True)
    p.add_argument("--p2r", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=50)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluation sweep")
    common(p)
    p.add_argument("--task", choices=["goal", "obstacle"], default="goal")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--scales", default="1", help="comma-separated scale list")
    p.add_argument("--guidance", choices=["signal", "latent", "none"],
                   default="signal")
    p.add_argument("--planner", required=True)
    p.add_argument("--planner-stats", default=None)
    p.add_argument("--policy", required=True)
    p.add_argument("--cost-windows", type=int, default=0,
                   help="measure guidance cost on this many windows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="re-render figures for a finished run")
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalFault as e:
        print(f"error: numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
