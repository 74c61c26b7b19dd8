"""Command-line entry point: ``imbfsl <command> [options]``.

Exit codes: 0 ok, 1 usage, 2 data/capacity/parse error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .config import PRESETS, resolve_config
from .data import gen_synthetic, induce_group_step, induce_imbalance, read_manifest, save_manifest, split_classes
from .errors import ImbfslError, InputError, ParseError
from .harness import RunReport, evaluate, run_condition_matrix, train_cell, _cached_pools
from .imbalance import parse_spec
from .learners import load_state, make_learner, save_state
from .stats import markdown_table, ordering_check, plot_csv, summarize

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

RESULTS_CSV = "results.csv"
RESULTS_JSONL = "results.jsonl"
REPORT_MD = "report.md"
PLOT_CSV = "plot.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write(path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _ensure_dir(path) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def _experiment(args):
    exp = resolve_config(args.config)
    if args.seed is not None:
        exp = dataclasses.replace(exp, seeds=(args.seed,))
    return exp


def _csv_header() -> str:
    return RunReport.CSV_HEADER + ",config_hash"


def _csv_line(report: RunReport, config_hash: str) -> str:
    return f"{report.csv_row()},{config_hash}"


def _jsonl_line(report: RunReport, config_hash: str) -> str:
    d = json.loads(report.to_json())
    d["config_hash"] = config_hash
    return json.dumps(d, sort_keys=True)


def write_results(out_dir, reports, config_hash) -> None:
    _write(os.path.join(out_dir, RESULTS_CSV),
           "\n".join([_csv_header()] + [_csv_line(r, config_hash) for r in reports]) + "\n")
    _write(os.path.join(out_dir, RESULTS_JSONL),
           "".join(_jsonl_line(r, config_hash) + "\n" for r in reports))


def read_results(path) -> tuple[list[RunReport], list[str]]:
    reports, hashes = [], []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    reports.append(RunReport.from_json(line))
                    hashes.append(json.loads(line).get("config_hash", ""))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(f"bad result record ({exc})", lineno, path) from None
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    if not reports:
        raise InputError(f"{path} holds no results")
    return reports, hashes


def render_report(reports, config_hashes, learners=None, conditions=None) -> tuple[str, str]:
    """Markdown report and plot CSV for a set of run reports."""
    summaries = summarize(reports)
    conds = conditions or list(dict.fromkeys(r.condition for r in reports))
    lrns = learners or list(dict.fromkeys(r.learner for r in reports))
    seeds = sorted({r.seed for r in reports})
    lines = ["# Few-shot imbalance results", "",
             f"config hash: {', '.join(sorted(set(h for h in config_hashes if h))) or 'n/a'}",
             f"seeds: {', '.join(str(s) for s in seeds)}", "",
             markdown_table(summaries, conds, lrns)]
    names = {s.condition: s.role for s in summaries}
    roles = set(names.values())
    if {"balanced", "dataset_imbalance", "task_imbalance"} <= roles:
        pick = {role: next(c for c in conds if names.get(c) == role) for role in roles if role}
        v = ordering_check(summaries, pick["dataset_imbalance"], pick["task_imbalance"], pick.get("combined"))
        lines += ["## Ordering check", ""] + [f"- {line}" for line in v.lines()] + [""]
    return "\n".join(lines), plot_csv(summaries)


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    exp = _experiment(args)
    if exp.synthetic is None:
        raise InputError("gen needs a [data] section with synthetic settings")
    out = _ensure_dir(args.out)
    pool = gen_synthetic(exp.synthetic)
    meta = {"config_hash": exp.config_hash, "seed": exp.synthetic.seed}
    save_manifest(pool, os.path.join(out, "pool.manifest"), meta)
    for name, part in zip(("train", "val", "test"), split_classes(pool, exp.split)):
        if part is not None:
            save_manifest(part, os.path.join(out, f"{name}.manifest"), {**meta, "split_seed": exp.split.seed})
    print(f"wrote {pool.n_classes} classes, {pool.total} samples to {out}")
    return EXIT_OK


def cmd_induce(args) -> int:
    pool, meta = read_manifest(args.manifest)
    with open(args.manifest, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    seed = args.seed if args.seed is not None else 0
    if args.group is not None:
        try:
            k_min, k_max = (int(v) for v in args.spec.split(","))
        except ValueError:
            raise UsageError("with --group, SPEC is 'k_min,k_max'") from None
        out_pool = induce_group_step(pool, args.group, k_min, k_max, seed)
        label = f"group:{args.group}:{k_min}:{k_max}"
    else:
        spec = parse_spec(args.spec)
        out_pool = induce_imbalance(pool, spec, seed)
        label = str(spec)
    chash = hashlib.sha256(json.dumps([digest, label, seed]).encode()).hexdigest()[:16]
    out_meta = {k: v for k, v in meta.items() if k not in ("config_hash", "seed")}
    out_meta.update({"config_hash": chash, "seed": seed, "source_hash": meta.get("config_hash", digest[:16])})
    save_manifest(out_pool, args.out, out_meta)
    print(f"{label}: {out_pool.total} samples, sizes {' '.join(str(s) for s in out_pool.sizes)}")
    return EXIT_OK


def _checkpoint_name(learner, condition, seed) -> str:
    return f"{learner}__{condition}__s{seed}.params"


def cmd_train(args) -> int:
    exp = _experiment(args)
    lc = exp.learner(args.learner) if args.learner else exp.learners[0]
    cond = exp.condition(args.condition) if args.condition else exp.conditions[0]
    out = _ensure_dir(args.out)
    for seed in exp.seeds:
        _, result = train_cell(exp, lc, cond, seed)
        path = os.path.join(out, _checkpoint_name(lc.name, cond.name, seed))
        history = " ".join(f"{t}:{a:.6f}" for t, a in result.val_history)
        save_state(path, lc, result.state, {"config_hash": exp.config_hash, "seed": seed,
                                            "condition": cond.name, "val_history": history})
        print(f"{path}: best val {result.best_val:.4f} after {result.val_history[result.best_index][0]} tasks")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = _experiment(args)
    cfg, state, meta = load_state(args.checkpoint)
    cname = args.condition or meta.get("condition")
    if cname is None:
        raise InputError(f"{args.checkpoint} names no condition; pass --condition")
    cond = exp.condition(cname)
    seed = args.seed if args.seed is not None else int(meta.get("seed", exp.seeds[0]))
    _, _, test = _cached_pools(exp)
    report = evaluate(make_learner(cfg), state, test, cond.task(exp.n_way, exp.query),
                      exp.train.eval_tasks, seed, cfg.name, cond.name, cond.role)
    out = _ensure_dir(args.out)
    write_results(out, [report], exp.config_hash)
    print(_csv_line(report, exp.config_hash))
    return EXIT_OK


def cmd_matrix(args) -> int:
    exp = _experiment(args)
    out = _ensure_dir(args.out)
    reports = run_condition_matrix(exp, jobs=args.jobs)
    write_results(out, reports, exp.config_hash)
    md, plot = render_report(reports, [exp.config_hash], [lc.name for lc in exp.learners],
                             [c.name for c in exp.conditions])
    _write(os.path.join(out, REPORT_MD), md)
    _write(os.path.join(out, PLOT_CSV), plot)
    print(md, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    src = args.results
    path = os.path.join(src, RESULTS_JSONL) if os.path.isdir(src) else src
    reports, hashes = read_results(path)
    md, plot = render_report(reports, hashes)
    out = _ensure_dir(args.out or (src if os.path.isdir(src) else os.path.dirname(path) or "."))
    _write(os.path.join(out, REPORT_MD), md)
    _write(os.path.join(out, PLOT_CSV), plot)
    print(md, end="")
    return EXIT_OK


def cmd_presets(args) -> int:
    from .config import preset_text
    if args.name:
        print(preset_text(args.name), end="")
    else:
        print("\n".join(PRESETS))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="imbfsl", description="Class-imbalance experiments for few-shot learners.")
    p.add_argument("--version", action="version", version=f"imbfsl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True, out=True, out_help="output directory"):
        if config:
            sp.add_argument("--config", required=True,
                            help=f"TOML config file or preset name ({', '.join(PRESETS)})")
        sp.add_argument("--seed", type=int, help="run only this seed instead of the config's list")
        if out:
            sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("gen", help="write the synthetic pool and its splits as manifests")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("induce", help="subsample a manifest to an imbalance profile")
    sp.add_argument("manifest")
    sp.add_argument("spec", help="e.g. 'linear(1,9,5)', or 'k_min,k_max' with --group")
    sp.add_argument("--group", help="shrink only classes carrying this group tag")
    common(sp, config=False, out_help="output manifest path")
    sp.set_defaults(func=cmd_induce)

    sp = sub.add_parser("train", help="train one learner under one condition, save checkpoints")
    common(sp)
    sp.add_argument("--learner", help="learner name (default: first in config)")
    sp.add_argument("--condition", help="condition name (default: first in config)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    sp.add_argument("checkpoint")
    common(sp)
    sp.add_argument("--condition", help="override the checkpoint's condition")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("matrix", help="run every learner x condition x seed cell")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("report", help="summarize a results directory or JSON-lines file")
    sp.add_argument("results")
    sp.add_argument("--out", help="output directory (default: alongside the results)")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("presets", help="list bundled presets or print one")
    sp.add_argument("name", nargs="?")
    sp.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ImbfslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
