"""Meta-training with validation-based model selection, evaluation, and the
condition x learner x seed experiment matrix."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import ClassPool, SplitSpec, SyntheticSpec, gen_synthetic, induce_group_step, induce_imbalance, split_classes
from .episodes import TaskSpec, derive_seed, sample_episode, sample_minibatch
from .errors import ImbfslError, InputError, NumericError
from .imbalance import ImbalanceSpec, linear
from .learners import Learner, LearnerConfig, LearnerState, make_learner

log = logging.getLogger(__name__)

Z95 = 1.96


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule. ``lr_schedule`` holds (first task index, lr) pairs."""

    total_tasks: int = 2000
    val_every: int = 250
    val_tasks: int = 100
    lr_schedule: tuple = ((0, 1e-3),)
    meta_batch: int | None = None
    eval_tasks: int = 600
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule", tuple((int(t), float(lr)) for t, lr in self.lr_schedule))
        if self.total_tasks < 1 or not 1 <= self.val_every <= self.total_tasks:
            raise InputError("need total_tasks >= val_every >= 1")
        if self.val_tasks < 1 or self.eval_tasks < 1:
            raise InputError("val_tasks and eval_tasks must be >= 1")
        thresholds = [t for t, _ in self.lr_schedule]
        if not thresholds or thresholds[0] != 0 or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise InputError("lr_schedule thresholds must start at 0 and strictly increase")

    def lr_at(self, task_index: int) -> float:
        lr = self.lr_schedule[0][1]
        for threshold, value in self.lr_schedule:
            if task_index >= threshold:
                lr = value
        return lr


ROLES = ("balanced", "dataset_imbalance", "task_imbalance", "combined")


@dataclass(frozen=True)
class Condition:
    """How the training pool and the support shots are skewed.

    ``dataset`` is an imbalance spec applied to the training pool, or ``None``
    to use the pool as is; ``group`` (with ``group_sizes``) instead shrinks one
    group of classes. ``shot`` applies to training *and* test episodes.
    """

    name: str
    dataset: ImbalanceSpec | None = None
    shot: int | ImbalanceSpec = 5
    group: str | None = None
    group_sizes: tuple | None = None

    def __post_init__(self):
        if self.group is not None:
            if self.dataset is not None:
                raise InputError(f"condition {self.name!r}: give either dataset or group, not both")
            if self.group_sizes is None or len(self.group_sizes) != 2:
                raise InputError(f"condition {self.name!r}: group step needs group_sizes=(k_min, k_max)")
        if not self.name or any(c in self.name for c in ",\n\"") or self.name != self.name.strip():
            raise InputError(f"condition name {self.name!r} must be plain text")

    @property
    def dataset_imbalanced(self) -> bool:
        if self.group is not None:
            return self.group_sizes[0] != self.group_sizes[1]
        return self.dataset is not None and not self.dataset.is_balanced

    @property
    def task_imbalanced(self) -> bool:
        return isinstance(self.shot, ImbalanceSpec) and not self.shot.is_balanced

    @property
    def role(self) -> str:
        return ROLES[int(self.dataset_imbalanced) + 2 * int(self.task_imbalanced)]

    def task(self, n_way: int = 5, query: int = 15) -> TaskSpec:
        return TaskSpec(n_way, self.shot, query)

    def training_pool(self, pool: ClassPool, seed: int) -> ClassPool:
        if self.group is not None:
            return induce_group_step(pool, self.group, *self.group_sizes, seed=seed)
        if self.dataset is None:
            return pool
        return induce_imbalance(pool, self.dataset, seed)


def paper_conditions(k_min=30, k_max=570, k_bal=300, n_classes=64, shot=5, task_imbalance=None):
    """The four conditions compared in the dataset-vs-task experiment."""
    task_imbalance = task_imbalance or linear(1, 9, 5)
    bal = ImbalanceSpec("balanced", k_bal, k_bal, n_classes)
    skew = linear(k_min, k_max, n_classes)
    return [
        Condition("balanced", bal, shot),
        Condition("dataset_imbalance", skew, shot),
        Condition("task_imbalance", bal, task_imbalance),
        Condition("combined", skew, task_imbalance),
    ]


@dataclass
class RunReport:
    learner: str
    condition: str
    seed: int
    accuracies: np.ndarray
    role: str = ""

    def __post_init__(self):
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        if self.accuracies.size == 0:
            raise InputError("a run report needs at least one episode")
        if not np.all((self.accuracies >= 0.0) & (self.accuracies <= 1.0)):
            raise InputError("episode accuracies must lie in [0, 1]")

    @property
    def n_episodes(self) -> int:
        return int(self.accuracies.size)

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std(self) -> float:
        """Population standard deviation over episodes."""
        return float(self.accuracies.std())

    @property
    def ci95(self) -> float:
        return Z95 * self.std / math.sqrt(self.n_episodes)

    CSV_HEADER = "learner,condition,seed,n_episodes,mean_acc,std,ci95"

    def csv_row(self) -> str:
        return (f"{self.learner},{self.condition},{self.seed},{self.n_episodes},"
                f"{self.mean:.10f},{self.std:.10f},{self.ci95:.10f}")

    def to_json(self) -> str:
        return json.dumps({"learner": self.learner, "condition": self.condition, "role": self.role,
                           "seed": self.seed, "accuracies": [float(a) for a in self.accuracies]},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        return cls(d["learner"], d["condition"], int(d["seed"]), d["accuracies"], d.get("role", ""))


@dataclass
class TrainResult:
    state: LearnerState
    val_history: list = field(default_factory=list)  # (tasks seen, val accuracy)
    best_index: int = 0
    final_state: LearnerState | None = None

    @property
    def best_val(self) -> float:
        return self.val_history[self.best_index][1]


def episode_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _evaluate_accuracies(learner, state, pool, task, n_episodes, seed, stream):
    accs = np.empty(n_episodes)
    for i in range(n_episodes):
        ep = sample_episode(pool, task, derive_seed(seed, stream, i))
        accs[i] = episode_accuracy(learner.predict_proba(state, ep), ep.query_y)
    return accs


def evaluate(learner, state: LearnerState, pool: ClassPool, task: TaskSpec, n_episodes: int, seed: int,
             learner_name: str | None = None, condition: str = "", role: str = "") -> RunReport:
    """Accuracy over ``n_episodes`` seeded test episodes."""
    accs = _evaluate_accuracies(learner, state, pool, task, n_episodes, seed, "eval")
    name = learner_name or getattr(getattr(learner, "cfg", None), "name", type(learner).__name__)
    return RunReport(name, condition, seed, accs, role)


def training_task(cfg: LearnerConfig, task: TaskSpec) -> TaskSpec:
    """Training episodes may use a different way/query than evaluation."""
    n_way = cfg.train_n_way or task.n_way
    query = cfg.train_query or task.query_per_class
    shot = task.shot
    if isinstance(shot, ImbalanceSpec) and shot.n_classes != n_way:
        shot = ImbalanceSpec(shot.kind, shot.k_min, shot.k_max, n_way, shot.m_minority, shot.power)
    return TaskSpec(n_way, shot, query)


def meta_train(learner: Learner, train_pool: ClassPool, val_pool: ClassPool, task: TaskSpec,
               cfg: TrainConfig, val_task: TaskSpec | None = None) -> TrainResult:
    """Train for ``cfg.total_tasks`` episodes (or mini-batches) and return the
    state that scored best on validation.

    Validation runs every ``val_every`` tasks on ``val_tasks`` episodes drawn
    from a fresh seeded stream per round; ties keep the earlier state.
    """
    val_task = val_task or task
    train_task = training_task(learner.cfg, task)
    n_way = train_task.n_way
    state = learner.init_state(derive_seed(cfg.seed, "init"), train_pool.n_classes, n_way)
    opt = nm.make_optimizer(learner.cfg.optimizer, cfg.lr_at(0))
    meta_batch = cfg.meta_batch or learner.cfg.meta_batch
    best, best_score, history = None, -np.inf, []
    pending = 0

    for t in range(cfg.total_tasks):
        lr = cfg.lr_at(t)
        seed_t = derive_seed(cfg.seed, "train", t)
        if learner.episodic:
            ep = sample_episode(train_pool, train_task, seed_t)
            loss = learner.accumulate_task_grad(state, ep)
            pending += 1
            if pending == meta_batch or t == cfg.total_tasks - 1:
                if pending > 1:
                    for _, p in state.params.items():
                        p.grad = p.grad / pending
                opt.step(state.params, lr)
                pending = 0
        else:
            batch = sample_minibatch(train_pool, min(learner.cfg.batch_size, train_pool.total), seed_t)
            loss = learner.pretrain_step(state, batch, opt, lr)
        if not math.isfinite(loss):
            raise NumericError(f"{learner.cfg.name}: non-finite training loss {loss} at task {t}")

        if (t + 1) % cfg.val_every == 0 or t == cfg.total_tasks - 1:
            learner.refresh_aux(state, train_pool)
            rnd = len(history)
            accs = _evaluate_accuracies(learner, state, val_pool, val_task, cfg.val_tasks,
                                        derive_seed(cfg.seed, "val", rnd), "val")
            score = float(accs.mean())
            history.append((t + 1, score))
            log.debug("%s task %d val %.4f", learner.cfg.name, t + 1, score)
            if score > best_score:
                best, best_score = state.copy(), score
    return TrainResult(best, history, int(np.argmax([s for _, s in history])), state)


# ---------------------------------------------------------------- experiment

@dataclass(frozen=True)
class Experiment:
    """Everything needed to reproduce one cell of the matrix from its seed."""

    synthetic: SyntheticSpec | None = None
    manifest: str | None = None
    split: SplitSpec = SplitSpec(64, 16, 20, seed=0)
    conditions: tuple = ()
    learners: tuple = ()
    train: TrainConfig = TrainConfig()
    n_way: int = 5
    query: int = 15
    seeds: tuple = (0, 1, 2)
    config_hash: str = ""

    def pools(self) -> tuple[ClassPool, ClassPool, ClassPool]:
        if self.manifest is not None:
            from .data import load_manifest
            pool = load_manifest(self.manifest)
        elif self.synthetic is not None:
            pool = gen_synthetic(self.synthetic)
        else:
            raise InputError("experiment needs a synthetic spec or a manifest")
        train, val, test = split_classes(pool, self.split)
        if train is None or val is None or test is None:
            raise InputError("experiment needs non-empty train, val and test splits")
        return train, val, test

    def condition(self, name: str) -> Condition:
        for c in self.conditions:
            if c.name == name:
                return c
        raise InputError(f"no condition named {name!r}")

    def learner(self, name: str) -> LearnerConfig:
        for lc in self.learners:
            if lc.name == name:
                return lc
        raise InputError(f"no learner named {name!r}")


_POOL_CACHE: dict = {}


def _cached_pools(exp: Experiment):
    key = (exp.synthetic, exp.manifest, exp.split)
    if key not in _POOL_CACHE:
        _POOL_CACHE.clear()
        _POOL_CACHE[key] = exp.pools()
    return _POOL_CACHE[key]


def train_cell(exp: Experiment, learner_cfg: LearnerConfig, condition: Condition, seed: int):
    """Train one (learner, condition, seed) cell; returns (learner, TrainResult)."""
    base_train, val, _ = _cached_pools(exp)
    train_pool = condition.training_pool(base_train, derive_seed(seed, "induce"))
    learner = make_learner(learner_cfg)
    cfg = TrainConfig(exp.train.total_tasks, exp.train.val_every, exp.train.val_tasks,
                      exp.train.lr_schedule, exp.train.meta_batch, exp.train.eval_tasks, seed)
    task = condition.task(exp.n_way, exp.query)
    return learner, meta_train(learner, train_pool, val, task, cfg)


def run_cell(exp: Experiment, learner_cfg: LearnerConfig, condition: Condition, seed: int) -> RunReport:
    _, _, test = _cached_pools(exp)
    try:
        learner, result = train_cell(exp, learner_cfg, condition, seed)
        return evaluate(learner, result.state, test, condition.task(exp.n_way, exp.query),
                        exp.train.eval_tasks, seed, learner_cfg.name, condition.name, condition.role)
    except ImbfslError as exc:
        exc.args = (f"cell (learner={learner_cfg.name}, condition={condition.name}, seed={seed}): "
                    f"{exc.args[0] if exc.args else exc}",)
        raise


def _run_cell_args(args):
    return run_cell(*args)


def run_condition_matrix(exp: Experiment, jobs: int = 1, learners=None, conditions=None,
                         seeds=None) -> list[RunReport]:
    """Train and evaluate every (learner, condition, seed) cell.

    Reports come back in learner-major, then condition, then seed order no
    matter how many worker processes run them.
    """
    learners = exp.learners if learners is None else learners
    conditions = exp.conditions if conditions is None else conditions
    seeds = exp.seeds if seeds is None else seeds
    cells = [(exp, lc, c, s) for lc in learners for c in conditions for s in seeds]
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(*cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_args, cells))


def diff_to_balanced(reports: list[RunReport], baseline: str | None = None) -> dict[str, float]:
    """Mean over learners and seeds of ``acc(condition) - acc(balanced)``, in points.

    The balanced partner is the condition named ``baseline``, else the one named
    "balanced", else the first report whose role is balanced.
    """
    if baseline is None:
        names = {r.condition for r in reports}
        if "balanced" in names:
            baseline = "balanced"
        else:
            roles = [r.condition for r in reports if r.role == "balanced"]
            if not roles:
                raise InputError("no balanced condition among the reports")
            baseline = roles[0]
    ref = {(r.learner, r.seed): r.mean for r in reports if r.condition == baseline}
    diffs: dict[str, list] = {}
    for r in reports:
        key = (r.learner, r.seed)
        if key not in ref:
            raise InputError(f"no {baseline!r} partner for learner {r.learner!r} seed {r.seed}")
        diffs.setdefault(r.condition, []).append(100.0 * (r.mean - ref[key]))
    return {c: float(np.mean(v)) for c, v in diffs.items()}
