"""``taskmerge`` command line."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import theory
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (default_config_text, loss_from, output_root, read_config,
                     scenario_config, _section)
from .data import DatasetSpec
from .distac import KDConfig, distac_condition, write_distac_history
from .errors import DomainError, TaskMergeError
from .merging import METHODS, compute_task_vector, plan_merge, tune_lambda
from .metrics import accuracy
from .report import load_results, report_emit, table1_rows
from .scenario import SCENARIOS, base_spec, build_suite, run_grid
from .trainer import finetune, pretrain


def _load(args):
    cp = read_config(args.config, args.set or ())
    return cp, scenario_config(cp)


def _dataset_from_meta(meta: dict) -> DatasetSpec:
    if "dataset" not in meta:
        raise DomainError("checkpoint carries no dataset description")
    return DatasetSpec(**meta["dataset"])


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_pretrain(args) -> int:
    cp, cfg = _load(args)
    suite = build_suite(cfg.dataset)
    spec = base_spec(cfg, suite)
    theta = pretrain(spec, suite.pretrain_x, suite.pretrain_targets,
                     replace(cfg.pretrain, seed=cfg.dataset.seed))
    out = Path(args.out) if args.out else output_root(cp) / "pretrained.tvck"
    save_checkpoint(out, theta, spec, {"role": "pretrained", "dataset": asdict(cfg.dataset)})
    _print({"checkpoint": str(out), "num_params": len(theta)})
    return 0


def cmd_finetune(args) -> int:
    cp, cfg = _load(args)
    pre = load_checkpoint(args.pretrained)
    ds = _dataset_from_meta(pre.meta)
    task = build_suite(ds).tasks[args.task]
    spec = pre.spec.restricted(task.class_window)
    tc = replace(cfg.train, learning_rate=cfg.train.learning_rate * args.lr_mult,
                 loss=loss_from(_section(cp, "loss")), seed=1000 * ds.seed + args.task)
    theta = finetune(spec, pre.theta, task.train, tc)
    out = Path(args.out) if args.out else output_root(cp) / f"finetuned_task{args.task}.tvck"
    save_checkpoint(out, theta, pre.spec, {"role": "finetuned", "task": args.task,
                                           "dataset": asdict(ds), "train": tc.summary()})
    _print({"checkpoint": str(out), "val_accuracy": accuracy(spec, theta, task.val),
            "task_vector_norm": (theta - pre.theta).norm()})
    return 0


def cmd_merge(args) -> int:
    cp, cfg = _load(args)
    pre = load_checkpoint(args.pretrained)
    tasks = build_suite(_dataset_from_meta(pre.meta)).tasks
    fts = [load_checkpoint(p) for p in args.finetuned]
    idx = [int(f.meta.get("task", i)) for i, f in enumerate(fts)]
    specs = [pre.spec.restricted(tasks[i].class_window) for i in idx]
    tvs = [compute_task_vector(f.theta, pre.theta, f"task{i}") for f, i in zip(fts, idx)]
    mcfg = replace(cfg.merge, method=args.method or cfg.merge.method)
    plan = plan_merge(tvs, mcfg)

    def val(theta):
        return float(np.mean([accuracy(s, theta, tasks[i].val) for s, i in zip(specs, idx)]))

    lam = args.lam
    if lam is None:
        lam = tune_lambda(lambda l: plan.merged(pre.theta, l), val, mcfg.lambda_grid)[0] \
            if plan.uses_lambda else 1.0
    merged = plan.merged(pre.theta, lam)
    if args.out:
        save_checkpoint(args.out, merged, pre.spec, {"role": "merged", "method": mcfg.method,
                                                     "lam": lam, "dataset": pre.meta["dataset"]})
    _print({"method": mcfg.method, "lam": lam, "val_accuracy": val(merged),
            "per_task_val": {f"task{i}": accuracy(s, merged, tasks[i].val) for s, i in zip(specs, idx)}})
    return 0


def cmd_distac(args) -> int:
    cp, cfg = _load(args)
    pre = load_checkpoint(args.pretrained)
    ft = load_checkpoint(args.finetuned)
    t = int(ft.meta.get("task", args.task if args.task is not None else 0))
    task = build_suite(_dataset_from_meta(pre.meta)).tasks[t]
    spec = pre.spec.restricted(task.class_window)
    tmpl = cfg.distac or KDConfig()
    kw = dict(beta=tmpl.beta, steps=tmpl.steps, learning_rate=tmpl.learning_rate,
              batch_size=tmpl.batch_size, optimizer=tmpl.optimizer, seed=tmpl.seed)
    if args.profile == "low_confidence":
        kd = KDConfig.low_confidence(**kw)
    else:
        if args.kappa is None:
            raise DomainError(f"profile {args.profile} needs --kappa")
        make = KDConfig.norm_mismatch if args.profile == "norm_mismatch" else KDConfig.combined
        kd = make(args.kappa, **kw)
    hist = []
    student = distac_condition(spec, pre.theta, ft.theta - pre.theta, task.unlabeled, kd,
                               monitor=task.val, history=hist, log_every=cfg.history_every)
    if args.history:
        write_distac_history(hist, args.history)
    out = Path(args.out) if args.out else output_root(cp) / f"distac_task{t}.tvck"
    save_checkpoint(out, student, pre.spec, {"role": "distac", "task": t, "distac": kd.summary(),
                                             "dataset": pre.meta["dataset"]})
    _print({"checkpoint": str(out), "teacher_val_accuracy": accuracy(spec, ft.theta, task.val),
            "student_val_accuracy": accuracy(spec, student, task.val),
            "rel_norm": (student - pre.theta).norm() / (kd.kappa * (ft.theta - pre.theta).norm())})
    return 0


def cmd_scenario(args) -> int:
    cp, cfg = _load(args)
    scenarios = args.scenarios.split(",") if args.scenarios else [cfg.scenario]
    result = run_grid(cfg, scenarios)
    out = Path(args.out) if args.out else output_root(cp) / "scenario"
    report_emit(result, out)
    for row in table1_rows(result):
        print(",".join(row))
    failed = [c for c in result.cells() if c["status"] == "fail"]
    print(f"wrote {out}; {len(failed)} failed cell(s)", file=sys.stderr)
    return 1 if failed else 0


def cmd_theory(args) -> int:
    kw = dict(g_scale=args.g_scale, penalty_curvature=args.penalty_curvature)
    q1, q2 = theory.random_task_pair(args.seed, args.dim, args.lam, **kw)
    c = theory.MergeCoeffs(args.alpha, args.beta)
    out = {"seed": args.seed, "dim": args.dim, "lam_cal": args.lam}
    for t in (1, 2):
        exact, first = theory.merged_loss_delta(q1, q2, c, t, args.full_firstorder)
        out[f"task{t}"] = {"exact_delta": exact, "firstorder_delta": first}
    if args.sweep:
        lams = [float(v) for v in args.lambdas.split(",")]
        rows = theory.lambda_sweep(q1, q2, c, 1, lams, args.full_firstorder)
        theory.write_sweep_csv(rows, args.sweep)
        out["sweep"] = args.sweep
    _print(out)
    return 0


def cmd_report(args) -> int:
    data = load_results(args.results)
    out = Path(args.out) if args.out else Path(args.results).parent
    report_emit(data, out)
    for row in table1_rows(data):
        print(",".join(row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskmerge", description=__doc__)
    p.add_argument("--print-default-config", action="store_true",
                   help="print a config file with every key at its default and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")
        sp.add_argument("--out", help="output path (default under $TASKMERGE_OUT)")

    sp = sub.add_parser("pretrain", help="pretrain a base model on the coarse task")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune one task from a pretrained checkpoint")
    common(sp)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--lr-mult", type=float, default=1.0)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("merge", help="merge fine-tuned checkpoints")
    common(sp)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--finetuned", nargs="+", required=True)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--lam", type=float, help="fixed coefficient (default: tune on validation)")
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("distac", help="condition one task vector by distillation")
    common(sp)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--finetuned", required=True)
    sp.add_argument("--task", type=int)
    sp.add_argument("--profile", choices=("norm_mismatch", "low_confidence", "combined"),
                    default="low_confidence")
    sp.add_argument("--kappa", type=float)
    sp.add_argument("--history", help="CSV path for the conditioning curve")
    sp.set_defaults(func=cmd_distac)

    sp = sub.add_parser("scenario", help="run the merge grid and write a report")
    common(sp)
    sp.add_argument("--scenarios", help=f"comma list from {','.join(SCENARIOS)}")
    sp.set_defaults(func=cmd_scenario)

    sp = sub.add_parser("theory", help="quadratic two-task calibration check")
    sp.add_argument("--seed", type=int, default=9)
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--lam", type=float, default=1e-3)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--beta", type=float, default=0.005)
    sp.add_argument("--g-scale", type=float, default=0.1)
    sp.add_argument("--penalty-curvature", choices=("spd", "zero"), default="spd")
    sp.add_argument("--full-firstorder", action="store_true")
    sp.add_argument("--sweep", help="CSV path for a sweep over --lambdas")
    sp.add_argument("--lambdas", default="0.2,0.1,0.05,0.025")
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("report", help="re-emit report files from results.json")
    sp.add_argument("--results", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        sys.stdout.write(default_config_text())
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except TaskMergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
