"""Aggregate summaries of run reports, the dataset-vs-task ordering verdict,
and Markdown/CSV emitters for tables and bar-plot data.

Accuracy differences are *signed* and in points: ``delta = 100 * (acc_cond -
acc_balanced)``, so a harmful condition has a negative delta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .harness import Z95, RunReport


@dataclass(frozen=True)
class Summary:
    learner: str
    condition: str
    n: int
    mean: float
    std: float
    ci95: float
    delta_vs_balanced: float | None
    role: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise InputError("a summary needs n > 0")


def _baseline_name(reports, baseline):
    if baseline is not None:
        return baseline
    names = {r.condition for r in reports}
    if "balanced" in names:
        return "balanced"
    balanced = sorted({r.condition for r in reports if r.role == "balanced"})
    return balanced[0] if balanced else None


def summarize(reports: list[RunReport], baseline: str | None = None) -> list[Summary]:
    """One summary per (learner, condition), sorted by that key.

    Episode accuracies are pooled across seeds for mean/std/ci95 (population
    std). ``delta_vs_balanced`` is the seed-averaged paired difference to the
    balanced condition of the same learner and seed, or ``None`` when the
    learner has no balanced run.
    """
    if not reports:
        raise InputError("nothing to summarize")
    base = _baseline_name(reports, baseline)
    groups: dict[tuple, list] = {}
    for r in reports:
        groups.setdefault((r.learner, r.condition), []).append(r)
    ref = {(r.learner, r.seed): r.mean for r in reports if r.condition == base}

    out = []
    for (learner, condition) in sorted(groups):
        rs = sorted(groups[(learner, condition)], key=lambda r: r.seed)
        accs = np.concatenate([r.accuracies for r in rs])
        std = float(accs.std())
        if condition == base:
            delta = 0.0
        elif all((learner, r.seed) in ref for r in rs):
            delta = float(np.mean([100.0 * (r.mean - ref[(learner, r.seed)]) for r in rs]))
        else:
            delta = None
        roles = {r.role for r in rs}
        out.append(Summary(learner, condition, int(accs.size), float(accs.mean()), std,
                           Z95 * std / math.sqrt(accs.size), delta, roles.pop() if len(roles) == 1 else ""))
    return out


@dataclass(frozen=True)
class Verdict:
    """Outcome of the dataset-vs-task ordering check (deltas in points)."""

    holds: bool
    delta_dataset: float
    delta_task: float
    delta_combined: float | None
    compounding: bool | None
    threshold: float

    def lines(self) -> list[str]:
        out = [f"delta dataset  {self.delta_dataset:+.2f} pts",
               f"delta task     {self.delta_task:+.2f} pts"]
        if self.delta_combined is not None:
            out.append(f"delta combined {self.delta_combined:+.2f} pts")
        out.append(f"task hurts more than dataset, dataset within -{self.threshold:g} pts: "
                   f"{'yes' if self.holds else 'no'}")
        if self.compounding is not None:
            out.append(f"combined at least as harmful as task: {'yes' if self.compounding else 'no'}")
        return out


def _mean_delta(summaries, condition, learners):
    vals = [s.delta_vs_balanced for s in summaries if s.condition == condition
            and (learners is None or s.learner in learners)]
    if not vals:
        raise InputError(f"no summaries for condition {condition!r}")
    if any(v is None for v in vals):
        raise InputError(f"condition {condition!r} lacks a balanced partner")
    return float(np.mean(vals))


def ordering_check(summaries: list[Summary], dataset: str = "dataset_imbalance",
                   task: str = "task_imbalance", combined: str | None = "combined",
                   threshold: float = 3.0, learners=None) -> Verdict:
    """Is task-level imbalance more harmful than dataset-level imbalance?

    Holds iff the mean task delta is strictly below the mean dataset delta and
    the dataset delta is no worse than ``-threshold`` points. Deltas are
    averaged over ``learners`` (all by default). ``compounding`` reports
    whether the combined condition is at least as harmful as task imbalance
    alone; it is ``None`` when no combined condition is present.
    """
    d_data = _mean_delta(summaries, dataset, learners)
    d_task = _mean_delta(summaries, task, learners)
    d_comb, compounding = None, None
    if combined is not None and any(s.condition == combined for s in summaries):
        d_comb = _mean_delta(summaries, combined, learners)
        compounding = d_comb <= d_task
    # deltas are differences of float means; don't let rounding decide the boundary
    holds = d_task < d_data and d_data >= -threshold - 1e-9
    return Verdict(holds, d_data, d_task, d_comb, compounding, threshold)


def _ordered(values):
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen


def markdown_table(summaries: list[Summary], conditions=None, learners=None,
                   footer: str = "Avr. Diff. to balanced") -> str:
    """Learners as rows, conditions as columns, cells ``mean ± ci95`` in percent.

    The footer row averages each condition's delta over learners. Column and
    row order follow ``conditions``/``learners`` when given, else first
    appearance in ``summaries``.
    """
    if not summaries:
        raise InputError("nothing to tabulate")
    conditions = list(conditions or _ordered(s.condition for s in summaries))
    learners = list(learners or _ordered(s.learner for s in summaries))
    cell = {(s.learner, s.condition): s for s in summaries}
    lines = ["| learner | " + " | ".join(conditions) + " |",
             "|---|" + "---:|" * len(conditions)]
    for learner in learners:
        row = []
        for c in conditions:
            s = cell.get((learner, c))
            row.append("n/a" if s is None else f"{100 * s.mean:.2f} ± {100 * s.ci95:.2f}")
        lines.append(f"| {learner} | " + " | ".join(row) + " |")
    foot = []
    for c in conditions:
        ds = [cell[(lr, c)].delta_vs_balanced for lr in learners if (lr, c) in cell]
        ds = [d for d in ds if d is not None]
        foot.append(f"{np.mean(ds):+.2f}" if ds else "n/a")
    lines.append(f"| {footer} | " + " | ".join(foot) + " |")
    lines.append("")
    lines.append("Cells: mean accuracy (%) ± 95% CI half-width (1.96 * population std / sqrt(n)) "
                 "over pooled test episodes. Footer: mean paired difference to balanced, in points.")
    return "\n".join(lines) + "\n"


PLOT_HEADER = "condition,learner,delta,ci95"


def plot_csv(summaries: list[Summary]) -> str:
    """Bar-plot data: one row per non-baseline (condition, learner), delta and ci in points."""
    rows = [PLOT_HEADER]
    for s in sorted(summaries, key=lambda s: (s.condition, s.learner)):
        if s.delta_vs_balanced is None or s.role == "balanced" or s.condition == "balanced":
            continue
        rows.append(f"{s.condition},{s.learner},{s.delta_vs_balanced:.4f},{100 * s.ci95:.4f}")
    return "\n".join(rows) + "\n"
