"""Experiment configuration files (TOML) and the bundled presets.

Key reference::

    [experiment]   seeds = [0, 1, 2]     (required; no implicit entropy)
                   n_way = 5, query = 15
    [data]         classes, samples_per_class, dim, separation, groups,
                   group_shift, seed      -- synthetic pool
                   manifest = "path"      -- or a manifest (relative to the file)
    [split]        train, val, test, seed
    [train]        total_tasks, val_every, val_tasks, eval_tasks,
                   lr_schedule = [[0, 1e-3], [12500, 1e-4]], meta_batch
    [[condition]]  name, dataset = "linear(30,570,64)", shot = 5 | "linear(1,9,5)",
                   group = "g0", group_sizes = [25, 444]
    [[learner]]    kind, name, and any LearnerConfig field;
                   [learner.backbone] input_dim, hidden_dims, embed_dim, activation

The config hash is a digest of the resolved configuration (not the file's
bytes), so comments and key order do not change it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
import sys
from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SplitSpec, SyntheticSpec
from .errors import InputError, ParseError
from .harness import Condition, Experiment, TrainConfig
from .imbalance import ImbalanceSpec, parse_shot, parse_spec
from .learners import KINDS, LearnerConfig
from .numerics import BackboneConfig

PRESETS = ("fig1_conditions", "table1_step", "appendixC_reduced", "appendixD_longtail")

_SECTIONS = {"experiment", "data", "split", "train", "condition", "learner"}
_DATA_KEYS = {"classes": "n_classes", "samples_per_class": "samples_per_class", "dim": "dim",
              "separation": "class_separation", "groups": "n_groups", "group_shift": "group_shift",
              "seed": "seed"}
_TRAIN_KEYS = {"total_tasks", "val_every", "val_tasks", "eval_tasks", "lr_schedule", "meta_batch"}
_CONDITION_KEYS = {"name", "dataset", "shot", "group", "group_sizes"}
_LEARNER_KEYS = {f.name for f in dataclasses.fields(LearnerConfig)}
_BACKBONE_KEYS = {f.name for f in dataclasses.fields(BackboneConfig)}


def _locate(text: str, table: str | None, index: int, key: str | None) -> int | None:
    """Best-effort line number of ``key`` inside the ``index``-th ``table`` block."""
    lines = text.split("\n")
    start = 0
    if table is not None:
        header = re.compile(r"^\s*\[\[?\s*" + re.escape(table) + r"\s*\]\]?\s*(#.*)?$")
        hits = [i for i, line in enumerate(lines) if header.match(line)]
        if index >= len(hits):
            return None
        start = hits[index]
        if key is None:
            return start + 1
    if key is None:
        return None
    pattern = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for i in range(start, len(lines)):
        if i > start and table is not None and lines[i].lstrip().startswith("[") \
                and not lines[i].lstrip().startswith(f"[{table}."):
            break
        if pattern.match(lines[i]):
            return i + 1
    return start + 1 if table is not None else None


class _Ctx:
    def __init__(self, text, path):
        self.text, self.path = text, path

    def fail(self, msg, table=None, index=0, key=None):
        where = table if table is not None else ""
        if table in ("condition", "learner"):
            where = f"{table}[{index}]"
        label = ".".join(p for p in (where, key) if p)
        raise ParseError(f"{label}: {msg}" if label else msg, _locate(self.text, table, index, key), self.path)


def _check_keys(ctx, table, index, got, allowed):
    for key in got:
        if key not in allowed:
            ctx.fail(f"unknown key (expected one of {', '.join(sorted(allowed))})", table, index, key)


def _int(ctx, value, table, key, index=0):
    if isinstance(value, bool) or not isinstance(value, int):
        ctx.fail("must be an integer", table, index, key)
    return value


def parse_config(text: str, path=None, base_dir=None) -> Experiment:
    """Parse a TOML experiment config into an ``Experiment`` with its hash set."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        msg = re.sub(r"\s*\(at line \d+, column \d+\)$", "", str(exc))
        raise ParseError(msg, getattr(exc, "lineno", None), path) from None
    ctx = _Ctx(text, path)
    _check_keys(ctx, None, 0, raw, _SECTIONS)

    exp_t = raw.get("experiment", {})
    _check_keys(ctx, "experiment", 0, exp_t, {"seeds", "n_way", "query", "name"})
    if "seeds" not in exp_t:
        ctx.fail("experiment.seeds is required (seeds are always explicit)", "experiment")
    seeds = exp_t["seeds"]
    if not isinstance(seeds, list) or not seeds:
        ctx.fail("must be a non-empty list of integers", "experiment", 0, "seeds")
    seeds = tuple(_int(ctx, s, "experiment", "seeds") for s in seeds)
    if len(set(seeds)) != len(seeds):
        ctx.fail("duplicate seed", "experiment", 0, "seeds")
    n_way = _int(ctx, exp_t.get("n_way", 5), "experiment", "n_way")
    query = _int(ctx, exp_t.get("query", 15), "experiment", "query")

    data_t = raw.get("data")
    if not data_t:
        ctx.fail("missing [data] section")
    synthetic = manifest = None
    if "manifest" in data_t:
        if len(data_t) != 1:
            ctx.fail("manifest excludes the synthetic keys", "data", 0, "manifest")
        manifest = str(data_t["manifest"])
        if base_dir is not None and not os.path.isabs(manifest):
            manifest = os.path.normpath(os.path.join(base_dir, manifest))
    else:
        _check_keys(ctx, "data", 0, data_t, _DATA_KEYS)
        try:
            synthetic = SyntheticSpec(**{_DATA_KEYS[k]: v for k, v in data_t.items()})
        except (InputError, TypeError) as exc:
            ctx.fail(str(exc), "data")

    split_t = raw.get("split", {})
    _check_keys(ctx, "split", 0, split_t, {"train", "val", "test", "seed"})
    try:
        split = SplitSpec(split_t.get("train", 64), split_t.get("val", 16), split_t.get("test", 20),
                          split_t.get("seed", 0))
    except InputError as exc:
        ctx.fail(str(exc), "split")

    train_t = dict(raw.get("train", {}))
    _check_keys(ctx, "train", 0, train_t, _TRAIN_KEYS)
    if "lr_schedule" in train_t:
        sched = train_t["lr_schedule"]
        if not isinstance(sched, list) or not all(isinstance(p, list) and len(p) == 2 for p in sched):
            ctx.fail("must be a list of [task_index, lr] pairs", "train", 0, "lr_schedule")
        train_t["lr_schedule"] = tuple(tuple(p) for p in sched)
    try:
        train = TrainConfig(**train_t)
    except (InputError, TypeError, ValueError) as exc:
        ctx.fail(str(exc), "train")

    conditions = []
    for i, c in enumerate(raw.get("condition", [])):
        _check_keys(ctx, "condition", i, c, _CONDITION_KEYS)
        if "name" not in c:
            ctx.fail("missing name", "condition", i)
        key = None
        try:
            key = "dataset"
            dataset = parse_spec(c["dataset"]) if "dataset" in c else None
            key = "shot"
            shot = parse_shot(c.get("shot", 5))
            if isinstance(shot, ImbalanceSpec) and shot.n_classes != n_way:
                raise InputError(f"shot spec {shot} has {shot.n_classes} classes but n_way is {n_way}")
            key = None
            sizes = tuple(c["group_sizes"]) if "group_sizes" in c else None
            conditions.append(Condition(str(c["name"]), dataset, shot, c.get("group"), sizes))
        except InputError as exc:
            ctx.fail(str(exc), "condition", i, key)
    if not conditions:
        ctx.fail("at least one [[condition]] is required")
    names = [c.name for c in conditions]
    for i, n in enumerate(names):
        if names.index(n) != i:
            ctx.fail(f"duplicate condition name {n!r}", "condition", i, "name")

    learners = []
    for i, lt in enumerate(raw.get("learner", [])):
        _check_keys(ctx, "learner", i, lt, _LEARNER_KEYS)
        lt = dict(lt)
        if "backbone" in lt:
            bb = lt["backbone"]
            _check_keys(ctx, "learner", i, bb, _BACKBONE_KEYS)
            if "hidden_dims" in bb:
                bb = {**bb, "hidden_dims": tuple(bb["hidden_dims"])}
            try:
                lt["backbone"] = BackboneConfig(**bb)
            except (InputError, TypeError) as exc:
                ctx.fail(str(exc), "learner", i, "backbone")
        if "kind" not in lt:
            ctx.fail("missing kind", "learner", i)
        if lt["kind"] not in KINDS:
            ctx.fail(f"unknown learner kind {lt['kind']!r}; expected one of {', '.join(KINDS)}",
                     "learner", i, "kind")
        try:
            learners.append(LearnerConfig(**lt))
        except (InputError, TypeError) as exc:
            ctx.fail(str(exc), "learner", i)
    if not learners:
        ctx.fail("at least one [[learner]] is required")
    lnames = [lc.name for lc in learners]
    for i, n in enumerate(lnames):
        if lnames.index(n) != i:
            ctx.fail(f"duplicate learner name {n!r}", "learner", i, "name")

    exp = Experiment(synthetic, manifest, split, tuple(conditions), tuple(learners), train,
                     n_way, query, seeds)
    return dataclasses.replace(exp, config_hash=config_hash(exp))


def _canonical(exp: Experiment) -> dict:
    def spec(s):
        return None if s is None else str(s)

    return {
        "data": dataclasses.asdict(exp.synthetic) if exp.synthetic else {"manifest": exp.manifest},
        "split": dataclasses.asdict(exp.split),
        "train": dataclasses.asdict(exp.train),
        "n_way": exp.n_way,
        "query": exp.query,
        "seeds": list(exp.seeds),
        "conditions": [{"name": c.name, "dataset": spec(c.dataset), "shot": str(c.shot), "group": c.group,
                        "group_sizes": list(c.group_sizes) if c.group_sizes else None}
                       for c in exp.conditions],
        "learners": [json.loads(lc.to_json()) for lc in exp.learners],
    }


def config_hash(exp: Experiment) -> str:
    """Short digest of the resolved experiment, independent of seeds chosen at run time."""
    canon = _canonical(exp)
    canon.pop("seeds")
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> Experiment:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path=path, base_dir=os.path.dirname(os.path.abspath(path)))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise InputError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    return resources.files("imbfsl.presets").joinpath(f"{name}.toml").read_text()


def load_preset(name: str) -> Experiment:
    return parse_config(preset_text(name), path=f"<preset {name}>")


def resolve_config(ref) -> Experiment:
    """A file path, or ``preset:<name>`` / a bare preset name."""
    ref = os.fspath(ref)
    name = ref[len("preset:"):] if ref.startswith("preset:") else ref
    if name in PRESETS and not os.path.exists(ref):
        return load_preset(name)
    return load_config(ref)


__all__ = ["PRESETS", "parse_config", "load_config", "load_preset", "preset_text", "resolve_config",
           "config_hash"]
