"""INI configuration for the command line.

Sections map onto the config dataclasses::

    [scenario]  ScenarioConfig scalars (scenario, seeds, methods, ...)
    [dataset]   DatasetSpec
    [train]     fine-tuning TrainConfig; [pretrain] the pretraining one
    [loss]      loss for the ``finetune`` subcommand
    [merge]     MergeConfig
    [distac]    KDConfig, plus ``enabled = true|false``
    [output]    ``root`` (overridden by $TASKMERGE_OUT)

Values are parsed according to the type of the field's default; lists are
comma separated.  ``--set section.key=value`` overrides a single entry.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import MISSING, fields, replace
from pathlib import Path

from .data import DatasetSpec
from .distac import KDConfig
from .errors import DomainError
from .losses import LossSpec
from .merging import MergeConfig
from .scenario import ScenarioConfig
from .trainer import TrainConfig

OUTPUT_ENV = "TASKMERGE_OUT"
DEFAULT_OUTPUT = "taskmerge-out"
SECTIONS = ("scenario", "dataset", "train", "pretrain", "loss", "merge", "distac", "output")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise DomainError(f"not a boolean: {text!r}")


def _coerce(text: str, default, name: str):
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            sample = default[0] if default else ""
            return tuple(_coerce(s, sample, name) for s in items)
        return text.strip()
    except ValueError as exc:
        raise DomainError(f"bad value for {name}: {text!r}") from exc


def _field_default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _apply(obj, section: dict, label: str, skip=()):
    """Return ``obj`` with the scalar fields named in ``section`` replaced."""
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, text in section.items():
        if key in skip:
            continue
        if key not in known:
            raise DomainError(f"unknown key {label}.{key}")
        current = getattr(obj, key)
        if current is None:
            current = _field_default(known[key])
        if current is None and key == "output_window":
            raise DomainError(f"{label}.{key} cannot be set from a config file")
        # tuple fields whose default is empty still need an element type
        if isinstance(current, tuple) and not current:
            current = ("",)
        updates[key] = _coerce(text, current, f"{label}.{key}")
    return replace(obj, **updates) if updates else obj


def read_config(path=None, overrides=()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise DomainError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise DomainError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, value)
    for section in cp.sections():
        if section not in SECTIONS:
            raise DomainError(f"unknown config section [{section}]")
    return cp


def _section(cp, name: str) -> dict:
    return dict(cp.items(name)) if cp.has_section(name) else {}


def loss_from(section: dict) -> LossSpec:
    return _apply(LossSpec(), section, "loss")


def scenario_config(cp: configparser.ConfigParser) -> ScenarioConfig:
    """Build a ScenarioConfig; validation happens in the dataclass constructors."""
    base = ScenarioConfig()
    dataset = _apply(base.dataset, _section(cp, "dataset"), "dataset")
    train = _apply(base.train, _section(cp, "train"), "train", skip=("loss",))
    pre = _apply(base.pretrain, _section(cp, "pretrain"), "pretrain", skip=("loss",))
    merge = _apply(base.merge, _section(cp, "merge"), "merge")
    dsec = _section(cp, "distac")
    distac = None
    if _parse_bool(dsec.get("enabled", "true" if dsec else "false")):
        distac = _apply(KDConfig(), dsec, "distac", skip=("enabled",))
    sc = _section(cp, "scenario")
    if "num_tasks" in sc and "num_tasks" not in _section(cp, "dataset"):
        dataset = replace(dataset, num_tasks=int(sc["num_tasks"]))
    cfg = replace(base, dataset=dataset, train=train, pretrain=pre, merge=merge, distac=distac,
                  num_tasks=dataset.num_tasks)
    return _apply(cfg, sc, "scenario", skip=("num_tasks",))


def output_root(cp: configparser.ConfigParser | None = None) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    if cp is not None and cp.has_option("output", "root"):
        return Path(cp.get("output", "root"))
    return Path(DEFAULT_OUTPUT)


def default_config_text() -> str:
    """A commented config with every key at its default."""
    base = ScenarioConfig(distac=KDConfig())
    out = ["# taskmerge configuration; every key is optional"]

    def emit(name, obj, skip=()):
        out.append(f"\n[{name}]")
        for f in fields(obj):
            if f.name in skip:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{f.name} = {v}")

    emit("scenario", base, skip=("merge", "distac", "dataset", "train", "pretrain"))
    emit("dataset", base.dataset)
    emit("train", base.train, skip=("loss",))
    emit("pretrain", base.pretrain, skip=("loss",))
    emit("merge", base.merge)
    emit("distac", base.distac)
    out.append("enabled = true")
    out.append(f"\n[output]\nroot = {DEFAULT_OUTPUT}")
    return "\n".join(out) + "\n"
