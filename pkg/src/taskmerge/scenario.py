"""End-to-end merge grid: pretrain, fine-tune, condition, merge, evaluate.

One job per seed pretrains a base model, fine-tunes every source model a
scenario needs (memoised, so the Original models are shared with the
Norm-Mismatch rotations), and then walks the cells
``scenario x method x arm``.  Arms are ``raw`` (plain task vectors),
``distac`` (conditioned vectors) and ``kappa_only`` (the norm-matching
rescale without distillation).

Test splits sit behind :class:`TestGate`, which counts every access.  The
merge coefficient is chosen on validation splits only, and every merge cell
reads each task's test split exactly once per run.
"""

from __future__ import annotations

import traceback
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import DatasetSpec, TaskSuite, gen_synthetic_tasks, idx_tasks, load_idx
from .distac import KDConfig, choose_kappa_norm_match, distac_condition
from .errors import DomainError
from .linalg import entropy, softmax_temp
from .losses import LossSpec
from .merging import METHODS, MergeConfig, compute_task_vector, plan_merge, tune_lambda
from .metrics import (EvalResult, KAPPA_GRID, TaskEval, accuracy, accuracy_from_logits,
                      fit_temperature, nll, normalized_accuracy, reliability_from_probs)
from .model import ModelSpec, ParamVector, forward_logits
from .trainer import TrainConfig, finetune, pretrain, train_mtl

SCENARIOS = ("original", "norm_mismatch", "low_confidence", "combined")
CONFIDENCE_METHODS = ("label_smoothing", "mixup", "focal")
ARMS = ("raw", "distac", "kappa_only")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "original"
    num_tasks: int = 4
    merge: MergeConfig = field(default_factory=MergeConfig)
    distac: KDConfig | None = None
    confidence_method: str = "label_smoothing"
    seeds: tuple[int, ...] = (0, 1, 2)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    methods: tuple[str, ...] = METHODS
    smoothing_alpha: float = 0.1
    focal_gamma: float = 10.0
    lr_multiplier: float = 10.0
    hidden_dims: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    frozen_head: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=3e-3, steps=1000))
    include_mtl: bool = True
    scaling_sweep: bool = False
    history_every: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise DomainError(f"unknown scenario {self.scenario!r}")
        if self.confidence_method not in CONFIDENCE_METHODS:
            raise DomainError(f"unknown confidence method {self.confidence_method!r}")
        if self.num_tasks < 2:
            raise DomainError("need at least two tasks to merge")
        if self.num_tasks != self.dataset.num_tasks:
            raise DomainError("num_tasks disagrees with the dataset spec")
        if not self.seeds:
            raise DomainError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise DomainError("seeds must be distinct")
        for m in self.methods:
            if m not in METHODS:
                raise DomainError(f"unknown merge method {m!r}")
        if not self.lr_multiplier > 0:
            raise DomainError("lr_multiplier must be positive")
        if self.workers < 1 or self.history_every < 1:
            raise DomainError("workers and history_every must be >= 1")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def confidence_loss(self) -> LossSpec:
        if self.confidence_method == "label_smoothing":
            return LossSpec.label_smoothing(self.smoothing_alpha)
        if self.confidence_method == "focal":
            return LossSpec.focal(self.focal_gamma)
        return LossSpec.mixup()

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "num_tasks": self.num_tasks,
            "merge": asdict(self.merge),
            "distac": None if self.distac is None else self.distac.summary(),
            "confidence_method": self.confidence_method,
            "seeds": list(self.seeds),
            "dataset": asdict(self.dataset),
            "methods": list(self.methods),
            "smoothing_alpha": self.smoothing_alpha,
            "focal_gamma": self.focal_gamma,
            "lr_multiplier": self.lr_multiplier,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "frozen_head": self.frozen_head,
            "train": self.train.summary(),
            "pretrain": self.pretrain.summary(),
            "include_mtl": self.include_mtl,
            "scaling_sweep": self.scaling_sweep,
            "history_every": self.history_every,
        }


# ---- test-split access control ---------------------------------------------

class TestGate:
    """Holds the test splits and counts reads per ``(key, task)``."""

    __test__ = False  # not a pytest class

    def __init__(self, tasks):
        self._tests = [t.test for t in tasks]
        self.counts: Counter = Counter()

    def logits(self, key: tuple, task: int, spec: ModelSpec, theta: ParamVector):
        self.counts[key + (task,)] += 1
        split = self._tests[task]
        return forward_logits(spec, theta, split.x), split.y


def _score(gate: TestGate, key: tuple, task: int, spec: ModelSpec, theta: ParamVector):
    logits, y = gate.logits(key, task, spec, theta)
    probs = softmax_temp(logits)
    return accuracy_from_logits(logits, y), float(np.mean(entropy(probs))), probs, y


# ---- helpers -----------------------------------------------------------------

class _Memo:
    """Memoises values and failures so a broken stage fails every dependant cell."""

    def __init__(self):
        self._store = {}

    def get(self, key, fn):
        if key not in self._store:
            try:
                self._store[key] = (True, fn())
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                self._store[key] = (False, exc)
        ok, val = self._store[key]
        if not ok:
            raise val
        return val


def build_suite(ds: DatasetSpec) -> TaskSuite:
    if ds.kind == "synthetic_gaussian":
        return gen_synthetic_tasks(ds)
    train = load_idx(ds.idx_images, ds.idx_labels)
    test = load_idx(ds.idx_test_images, ds.idx_test_labels)
    return idx_tasks(train, test, ds.classes_per_task, ds.num_tasks, ds.val_fraction,
                     ds.n_unlabeled, ds.seed)


def base_spec(cfg: ScenarioConfig, suite: TaskSuite) -> ModelSpec:
    return ModelSpec(input_dim=suite.pretrain_x.shape[1], hidden_dims=cfg.hidden_dims,
                     num_classes=suite.num_classes, activation=cfg.activation,
                     frozen_head=cfg.frozen_head)


def scenario_runs(cfg: ScenarioConfig, scenario: str) -> list[tuple[str, tuple[float, ...], LossSpec]]:
    """``(run_id, per-task LR multipliers, loss)`` for every run of a scenario."""
    T = cfg.num_tasks
    ones = (1.0,) * T
    conf = cfg.confidence_loss() if scenario in ("low_confidence", "combined") else LossSpec()
    if scenario in ("original", "low_confidence"):
        return [("base", ones, conf)]
    runs = []
    for j in range(T):
        mult = tuple(cfg.lr_multiplier if i == j else 1.0 for i in range(T))
        runs.append((f"high{j}", mult, conf))
    return runs


def _fmt_exc(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


# ---- per-seed job --------------------------------------------------------------

@dataclass
class SeedOutput:
    seed: int
    cells: list = field(default_factory=list)
    sources: list = field(default_factory=list)
    conditioning: list = field(default_factory=list)
    references: list = field(default_factory=list)
    sweeps: list = field(default_factory=list)
    histories: dict = field(default_factory=dict)
    test_access: dict = field(default_factory=dict)


def _skip_reason(cfg: ScenarioConfig, scenario: str, arm: str) -> str | None:
    if arm == "raw":
        return None
    if cfg.distac is None:
        return "conditioning disabled (no distac config)"
    if scenario == "original":
        return "no flagged task vectors in the original scenario"
    if arm == "kappa_only" and scenario == "low_confidence":
        return "kappa is 1 under the low-confidence profile"
    return None


def run_seed(cfg: ScenarioConfig, scenarios, seed: int) -> SeedOutput:
    out = SeedOutput(seed)
    T = cfg.num_tasks
    try:
        suite = build_suite(replace(cfg.dataset, seed=seed))
        spec = base_spec(cfg, suite)
        tasks = suite.tasks
        specs = [spec.restricted(t.class_window) for t in tasks]
        theta_pre = pretrain(spec, suite.pretrain_x, suite.pretrain_targets,
                             replace(cfg.pretrain, seed=seed))
    except Exception as exc:  # noqa: BLE001 - the whole seed is unusable
        reason = _fmt_exc(exc)
        for scenario in scenarios:
            for method in cfg.methods:
                for arm in ARMS:
                    out.cells.append(_cell_record(seed, scenario, method, arm, "fail", reason))
        return out

    gate = TestGate(tasks)
    memo = _Memo()

    def source(t: int, mult: float, loss: LossSpec) -> ParamVector:
        tc = replace(cfg.train, learning_rate=cfg.train.learning_rate * mult, loss=loss,
                     seed=1000 * seed + t)
        return memo.get(("ft", t, mult, loss), lambda: finetune(specs[t], theta_pre, tasks[t].train, tc))

    def source_eval(t: int, mult: float, loss: LossSpec) -> tuple[float, float]:
        def go():
            theta = source(t, mult, loss)
            acc, ent, _, _ = _score(gate, ("source", mult, loss.kind, loss.alpha, loss.gamma), t,
                                    specs[t], theta)
            out.sources.append({
                "seed": seed, "task": t, "task_id": tasks[t].task_id, "lr_multiplier": mult,
                "loss": loss.kind, "accuracy": acc, "entropy": ent,
                "task_vector_norm": (theta - theta_pre).norm(),
            })
            return acc, ent
        return memo.get(("src_eval", t, mult, loss), go)

    def run_vectors(scenario, run_id, mult, loss, arm):
        """Source thetas, the thetas to merge for ``arm`` and conditioning info."""
        raw = [source(t, mult[t], loss) for t in range(T)]
        if arm == "raw":
            return raw, raw
        return raw, memo.get(("arm", scenario, run_id, arm),
                             lambda: _conditioned(scenario, run_id, raw, arm))

    def _conditioned(scenario, run_id, raw, arm):
        norms = [(th - theta_pre).norm() for th in raw]
        tmpl = cfg.distac
        out_thetas = list(raw)
        if scenario in ("norm_mismatch", "combined"):
            idx, kappa = choose_kappa_norm_match(norms)
            targets = {idx: kappa}
        else:
            idx, kappa = None, 1.0
            targets = {}
        if scenario in ("low_confidence", "combined"):
            for t in range(T):
                targets.setdefault(t, 1.0)
        for t, k in sorted(targets.items()):
            tau = raw[t] - theta_pre
            if arm == "kappa_only":
                out_thetas[t] = theta_pre + tau * k
                continue
            if scenario == "norm_mismatch":
                kd = replace(tmpl, kappa=k, t_tcr=10.0, t_stu=10.0, seed=tmpl.seed + t)
            else:
                kd = replace(tmpl, kappa=k, t_tcr=1.0, t_stu=10.0, seed=tmpl.seed + t)
            hist = []
            student = distac_condition(specs[t], theta_pre, tau, tasks[t].unlabeled, kd,
                                       monitor=tasks[t].val, history=hist,
                                       log_every=cfg.history_every)
            out_thetas[t] = student
            out.histories[f"seed{seed}_{scenario}_{run_id}_task{t}"] = [asdict(h) for h in hist]
            s_acc, s_ent, _, _ = _score(gate, ("student", scenario, run_id), t, specs[t], student)
            t_acc, t_ent = source_eval(t, *_run_key(scenario, run_id, t))
            out.conditioning.append({
                "seed": seed, "scenario": scenario, "run": run_id, "task": t,
                "kappa": k, "t_tcr": kd.t_tcr, "t_stu": kd.t_stu,
                "rel_norm": (student - theta_pre).norm() / (k * tau.norm()),
                "teacher_accuracy": t_acc, "teacher_entropy": t_ent,
                "student_accuracy": s_acc, "student_entropy": s_ent,
            })
        return out_thetas

    run_table = {s: scenario_runs(cfg, s) for s in scenarios}

    def _run_key(scenario, run_id, t):
        for rid, mult, loss in run_table[scenario]:
            if rid == run_id:
                return mult[t], loss
        raise KeyError(run_id)

    def val_score(theta):
        return float(np.mean([accuracy(specs[t], theta, tasks[t].val) for t in range(T)]))

    for scenario in scenarios:
        for method in cfg.methods:
            mcfg = replace(cfg.merge, method=method)
            for arm in ARMS:
                reason = _skip_reason(cfg, scenario, arm)
                if reason is not None:
                    out.cells.append(_cell_record(seed, scenario, method, arm, "skipped", reason))
                    continue
                try:
                    runs, probs, labels = [], [], []
                    for run_id, mult, loss in run_table[scenario]:
                        raw, thetas = run_vectors(scenario, run_id, mult, loss, arm)
                        ind = [source_eval(t, mult[t], loss)[0] for t in range(T)]
                        tvs = [compute_task_vector(th, theta_pre, tasks[t].task_id)
                               for t, th in enumerate(thetas)]
                        plan = plan_merge(tvs, mcfg)
                        if plan.uses_lambda:
                            lam, _ = tune_lambda(lambda l: plan.merged(theta_pre, l), val_score,
                                                 mcfg.lambda_grid)
                        else:
                            lam = None
                        merged = plan.merged(theta_pre, 1.0 if lam is None else lam)
                        res = EvalResult()
                        temps = []
                        key = ("cell", scenario, method, arm, run_id)
                        for t in range(T):
                            acc, ent, p, y = _score(gate, key, t, specs[t], merged)
                            probs.append(p)
                            labels.append(y)
                            res.per_task.append(TaskEval(tasks[t].task_id, acc,
                                                         normalized_accuracy(acc, ind[t]), ent))
                            vlog = forward_logits(specs[t], merged, tasks[t].val.x)
                            temp = fit_temperature(vlog, tasks[t].val.y)
                            temps.append({"temperature": temp,
                                          "val_nll": nll(vlog, tasks[t].val.y),
                                          "val_nll_scaled": nll(vlog, tasks[t].val.y, temp)})
                        d = res.to_dict()
                        for row, ind_acc, tmp in zip(d["per_task"], ind, temps):
                            row["individual_accuracy"] = ind_acc
                            row.update(tmp)
                        runs.append({"run": run_id, "lam": lam, "val_accuracy": val_score(merged),
                                     **d})
                    rel = reliability_from_probs(np.concatenate(probs), np.concatenate(labels))
                    rec = _cell_record(seed, scenario, method, arm, "pass", "")
                    rec["runs"] = runs
                    rec["aggregate"] = {
                        k: float(np.mean([r["aggregate"][k] for r in runs]))
                        for k in ("accuracy", "normalized_accuracy", "entropy")
                    }
                    rec["aggregate"]["ece"] = rel.ece
                    rec["reliability"] = rel.to_dict()
                    out.cells.append(rec)
                except Exception as exc:  # noqa: BLE001 - one cell, recorded
                    rec = _cell_record(seed, scenario, method, arm, "fail", _fmt_exc(exc))
                    rec["traceback"] = traceback.format_exc(limit=4)
                    out.cells.append(rec)

    # reference rows and sweeps; failures here are recorded, never fatal
    ref = {"seed": seed, "zero_shot": None, "mtl": None, "error": None}
    try:
        ref["zero_shot"] = [_score(gate, ("zero_shot",), t, specs[t], theta_pre)[0] for t in range(T)]
        if cfg.include_mtl:
            theta_mtl = train_mtl(specs, theta_pre, [t.train for t in tasks],
                                  replace(cfg.train, seed=1000 * seed + 999))
            ref["mtl"] = [_score(gate, ("mtl",), t, specs[t], theta_mtl)[0] for t in range(T)]
    except Exception as exc:  # noqa: BLE001
        ref["error"] = _fmt_exc(exc)
    out.references.append(ref)

    if cfg.scaling_sweep:
        for t in range(T):
            try:
                tau = source(t, 1.0, LossSpec()) - theta_pre
                curve = []
                for k in KAPPA_GRID:
                    acc = _score(gate, ("sweep", k), t, specs[t], theta_pre + tau * k)[0]
                    curve.append([k, acc])
                out.sweeps.append({"seed": seed, "task": t, "curve": curve})
            except Exception as exc:  # noqa: BLE001
                out.sweeps.append({"seed": seed, "task": t, "curve": None, "error": _fmt_exc(exc)})

    out.test_access = {"|".join(map(str, k)): v for k, v in sorted(gate.counts.items(), key=str)}
    return out


def _cell_record(seed, scenario, method, arm, status, reason) -> dict:
    return {"seed": seed, "scenario": scenario, "method": method, "arm": arm,
            "status": status, "reason": reason}


# ---- grid ------------------------------------------------------------------------

@dataclass
class GridResult:
    config: dict
    scenarios: tuple[str, ...]
    seeds: list[SeedOutput]

    def cells(self) -> list[dict]:
        order = {s: i for i, s in enumerate(SCENARIOS)}
        morder = {m: i for i, m in enumerate(METHODS)}
        aorder = {a: i for i, a in enumerate(ARMS)}
        rows = [c for s in self.seeds for c in s.cells]
        return sorted(rows, key=lambda c: (c["seed"], order[c["scenario"]], morder[c["method"]],
                                           aorder[c["arm"]]))

    def cell(self, seed: int, scenario: str, method: str, arm: str = "raw") -> dict:
        for c in self.cells():
            if (c["seed"], c["scenario"], c["method"], c["arm"]) == (seed, scenario, method, arm):
                return c
        raise KeyError((seed, scenario, method, arm))

    def seed_mean(self, scenario: str, method: str, arm: str = "raw",
                  key: str = "normalized_accuracy") -> float:
        vals = [c["aggregate"][key] for c in self.cells()
                if (c["scenario"], c["method"], c["arm"]) == (scenario, method, arm)
                and c["status"] == "pass"]
        if not vals:
            raise KeyError((scenario, method, arm))
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        by_seed = sorted(self.seeds, key=lambda s: s.seed)
        return {
            "config": self.config,
            "scenarios": list(self.scenarios),
            "cells": self.cells(),
            "sources": [r for s in by_seed for r in sorted(
                s.sources, key=lambda r: (r["task"], r["lr_multiplier"], r["loss"]))],
            "conditioning": [r for s in by_seed for r in sorted(
                s.conditioning, key=lambda r: (r["scenario"], r["run"], r["task"]))],
            "references": [r for s in by_seed for r in s.references],
            "sweeps": [r for s in by_seed for r in s.sweeps],
            "histories": {k: v for s in by_seed for k, v in sorted(s.histories.items())},
            "test_access": {f"seed{s.seed}|{k}": v for s in by_seed for k, v in s.test_access.items()},
        }


def _job(args):
    cfg, scenarios, seed = args
    return run_seed(cfg, scenarios, seed)


def run_grid(cfg: ScenarioConfig, scenarios=None) -> GridResult:
    """Run several scenarios sharing each seed's pretrained and fine-tuned models."""
    scenarios = tuple(scenarios or (cfg.scenario,))
    for s in scenarios:
        if s not in SCENARIOS:
            raise DomainError(f"unknown scenario {s!r}")
    scenarios = tuple(s for s in SCENARIOS if s in scenarios)
    jobs = [(cfg, scenarios, seed) for seed in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            outs = list(pool.map(_job, jobs))
    else:
        outs = [_job(j) for j in jobs]
    summary = cfg.summary()
    summary.pop("scenario")
    return GridResult(summary, scenarios, sorted(outs, key=lambda o: o.seed))


def run_scenario(cfg: ScenarioConfig) -> GridResult:
    return run_grid(cfg, (cfg.scenario,))
