"""Few-shot episode and mini-batch sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClassPool
from .errors import CapacityError, InputError
from .imbalance import ImbalanceSpec, parse_shot, profile

# Stream tags keep per-purpose seed sequences apart.
STREAMS = {"train": 1, "val": 2, "eval": 3, "init": 4, "induce": 5, "finetune": 6}


def derive_seed(run_seed: int, stream: str | int, index: int = 0) -> int:
    """Stable 63-bit seed for item ``index`` of a named stream of a run.

    Episodes are addressed by index rather than drawn from one running
    generator, so serial and parallel consumers see the same stream.
    """
    tag = STREAMS[stream] if isinstance(stream, str) else int(stream)
    state = np.random.SeedSequence([int(run_seed), tag, int(index)]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


@dataclass(frozen=True)
class TaskSpec:
    n_way: int = 5
    shot: int | ImbalanceSpec = 5
    query_per_class: int = 15

    def __post_init__(self):
        object.__setattr__(self, "shot", parse_shot(self.shot))
        if self.n_way < 2:
            raise InputError("n_way must be >= 2")
        if self.query_per_class < 1:
            raise InputError("query_per_class must be >= 1")
        if isinstance(self.shot, ImbalanceSpec):
            if self.shot.n_classes != self.n_way:
                raise InputError(f"shot spec {self.shot} has {self.shot.n_classes} classes, task is {self.n_way}-way")
        elif self.shot < 1:
            raise InputError("shot must be >= 1")

    @property
    def imbalanced(self) -> bool:
        return isinstance(self.shot, ImbalanceSpec) and not self.shot.is_balanced

    def shot_profile(self) -> np.ndarray:
        if isinstance(self.shot, ImbalanceSpec):
            return profile(self.shot)
        return np.full(self.n_way, self.shot, dtype=np.int64)

    def __str__(self):
        return f"{self.n_way}-way {self.shot}-shot {self.query_per_class}-query"


@dataclass(frozen=True, eq=False)
class Episode:
    """Support and query sets over local labels ``0..n_way-1``.

    ``class_map[l]`` is the pool class behind local label ``l``;
    ``support_rows``/``query_rows`` are row indices into that class's samples.
    Support samples are grouped by label in ascending order.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: tuple
    support_rows: np.ndarray
    query_rows: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    def shots(self) -> np.ndarray:
        return np.bincount(self.support_y, minlength=self.n_way)

    def relabel(self, perm) -> "Episode":
        """Same episode with local label ``l`` renamed to ``perm[l]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return Episode(self.support_x, perm[self.support_y], self.query_x, perm[self.query_y],
                       tuple(self.class_map[i] for i in inv), self.support_rows, self.query_rows)

    def dump(self) -> str:
        """Plain-text listing of the episode's classes and sample ids."""
        lines = ["episode",
                 "class_map " + " ".join(f"{i}={c}" for i, c in enumerate(self.class_map))]
        for name, ys, rows in (("support", self.support_y, self.support_rows),
                               ("query", self.query_y, self.query_rows)):
            ids = [f"{self.class_map[y]}/{r}" for y, r in zip(ys, rows)]
            lines.append(f"{name} " + " ".join(ids))
        return "\n".join(lines) + "\n"


def sample_episode(pool: ClassPool, task: TaskSpec, rng_seed: int) -> Episode:
    if pool.n_classes < task.n_way:
        raise CapacityError(f"{task.n_way}-way episode from a pool of {pool.n_classes} classes")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(pool.n_classes, size=task.n_way, replace=False)
    shots = task.shot_profile()
    if isinstance(task.shot, ImbalanceSpec):
        shots = shots[rng.permutation(task.n_way)]
    ids = pool.class_ids
    q = task.query_per_class
    sx, sy, srows, qx, qy, qrows = [], [], [], [], [], []
    for label, (ci, k) in enumerate(zip(chosen, shots)):
        x = pool.classes[ids[ci]]
        if len(x) < k + q:
            raise CapacityError(
                f"class {ids[ci]!r} has {len(x)} samples; episode needs {k} support + {q} query")
        rows = rng.choice(len(x), size=k + q, replace=False)
        srows.append(rows[:k])
        qrows.append(rows[k:])
        sx.append(x[rows[:k]])
        qx.append(x[rows[k:]])
        sy.append(np.full(k, label))
        qy.append(np.full(q, label))
    return Episode(np.concatenate(sx), np.concatenate(sy), np.concatenate(qx), np.concatenate(qy),
                   tuple(ids[c] for c in chosen), np.concatenate(srows), np.concatenate(qrows))


def sample_minibatch(pool: ClassPool, batch_size: int, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``batch_size`` distinct samples, uniform over all samples of the pool.

    Labels are global class positions in ``pool``. Draws are without
    replacement inside one batch; separate batches are independent.
    """
    xs, ys = pool.flat
    if not 1 <= batch_size <= len(xs):
        raise InputError(f"batch size {batch_size} outside [1, {len(xs)}]")
    idx = np.random.default_rng(rng_seed).choice(len(xs), size=batch_size, replace=False)
    return xs[idx], ys[idx]
