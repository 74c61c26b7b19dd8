"""Class pools: synthetic generation, class-disjoint splits, imbalance
induction and the text manifest format."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CapacityError, InputError, ParseError
from .imbalance import ImbalanceSpec, profile


@dataclass(frozen=True, eq=False)
class ClassPool:
    """Ordered mapping ``class_id -> (n_i, dim)`` sample matrix, plus group tags.

    ``known_groups`` may name groups that currently have no member classes
    (e.g. after a split), so group-level operations can still address them.
    Arrays are copied and frozen on construction.
    """

    classes: dict
    groups: dict
    dim: int
    known_groups: tuple = field(default=())

    def __post_init__(self):
        frozen = {}
        for cid, x in self.classes.items():
            cid = str(cid)
            if not cid or any(c.isspace() for c in cid):
                raise InputError(f"class id {cid!r} must be non-empty without whitespace")
            arr = np.array(x, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != self.dim:
                raise InputError(f"class {cid!r}: samples must have shape (n, {self.dim}), got {arr.shape}")
            if arr.shape[0] == 0:
                raise InputError(f"class {cid!r} is empty")
            arr.setflags(write=False)
            frozen[cid] = arr
        if not frozen:
            raise InputError("a class pool needs at least one class")
        groups = {str(k): str(v) for k, v in self.groups.items()}
        if set(groups) != set(frozen):
            raise InputError("every class needs exactly one group tag")
        for g in groups.values():
            if not g or any(c.isspace() for c in g) or "," in g:
                raise InputError(f"group tag {g!r} must be non-empty without whitespace or commas")
        object.__setattr__(self, "classes", frozen)
        object.__setattr__(self, "groups", {cid: groups[cid] for cid in frozen})
        object.__setattr__(self, "known_groups",
                           tuple(sorted(set(self.known_groups) | set(groups.values()))))

    @property
    def class_ids(self) -> list[str]:
        return list(self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(x) for x in self.classes.values()], dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    def members(self, group: str) -> list[str]:
        return [cid for cid, g in self.groups.items() if g == group]

    @cached_property
    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """All samples stacked, with global labels = class position in the pool."""
        xs = np.concatenate(list(self.classes.values()), axis=0)
        ys = np.repeat(np.arange(self.n_classes), self.sizes)
        xs.setflags(write=False)
        ys.setflags(write=False)
        return xs, ys

    def subset(self, class_ids) -> "ClassPool":
        ids = list(class_ids)
        return ClassPool({c: self.classes[c] for c in ids}, {c: self.groups[c] for c in ids},
                         self.dim, self.known_groups)

    def __eq__(self, other):
        if not isinstance(other, ClassPool):
            return NotImplemented
        return (self.dim == other.dim and self.class_ids == other.class_ids
                and self.groups == other.groups and self.known_groups == other.known_groups
                and all(np.array_equal(self.classes[c], other.classes[c]) for c in self.classes))

    __hash__ = None


@dataclass(frozen=True)
class SyntheticSpec:
    """Isotropic Gaussian classes.

    Class means are ``class_separation * z`` with ``z ~ N(0, I_dim)``, i.e.
    separation is the per-coordinate spread of the means in units of the unit
    within-class noise. Class ``c`` belongs to group ``c mod n_groups``; each
    group adds ``group_shift`` times its own random unit direction to its means.
    """

    n_classes: int = 100
    samples_per_class: int = 600
    dim: int = 16
    class_separation: float = 1.0
    n_groups: int = 1
    group_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.samples_per_class < 1 or self.dim < 1:
            raise InputError("n_classes, samples_per_class and dim must be positive")
        if self.class_separation < 0:
            raise InputError("class_separation must be non-negative")
        if self.n_groups < 1:
            raise InputError("n_groups must be >= 1")


def class_id(i: int, n: int) -> str:
    return f"c{i:0{max(3, len(str(n - 1)))}d}"


def gen_synthetic(spec: SyntheticSpec) -> ClassPool:
    rng = np.random.default_rng(spec.seed)
    directions = rng.normal(size=(spec.n_groups, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = spec.class_separation * rng.normal(size=(spec.n_classes, spec.dim))
    group_of = np.arange(spec.n_classes) % spec.n_groups
    means += spec.group_shift * directions[group_of]
    classes, groups = {}, {}
    for c in range(spec.n_classes):
        cid = class_id(c, spec.n_classes)
        classes[cid] = means[c] + rng.normal(size=(spec.samples_per_class, spec.dim))
        groups[cid] = f"g{group_of[c]}"
    return ClassPool(classes, groups, spec.dim, tuple(f"g{g}" for g in range(spec.n_groups)))


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    n_test: int
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise InputError("split sizes must be non-negative")


def split_classes(pool: ClassPool, split: SplitSpec) -> tuple[ClassPool | None, ...]:
    """Seeded class-disjoint train/val/test pools (``None`` for an empty split).

    Classes keep their original relative order inside each split.
    """
    need = split.n_train + split.n_val + split.n_test
    if need > pool.n_classes:
        raise InputError(f"split needs {need} classes but the pool has {pool.n_classes}")
    perm = np.random.default_rng(split.seed).permutation(pool.n_classes)
    ids = pool.class_ids
    out, start = [], 0
    for n in (split.n_train, split.n_val, split.n_test):
        chosen = np.sort(perm[start:start + n])
        start += n
        out.append(pool.subset(ids[i] for i in chosen) if n else None)
    return tuple(out)


def _subsample(pool: ClassPool, targets: dict, rng: np.random.Generator) -> ClassPool:
    for cid in pool.class_ids:
        have, want = len(pool.classes[cid]), targets[cid]
        if have < want:
            raise CapacityError(f"class {cid!r} has {have} samples but {want} were requested")
    classes = {}
    for cid in pool.class_ids:
        x = pool.classes[cid]
        keep = rng.permutation(len(x))[:targets[cid]]
        classes[cid] = x[keep]
    return ClassPool(classes, pool.groups, pool.dim, pool.known_groups)


def induce_imbalance(pool: ClassPool, spec: ImbalanceSpec, seed: int) -> ClassPool:
    """Subsample every class to a size drawn from ``spec``'s profile.

    Profile entries are assigned to classes by a seeded permutation; each class
    then keeps the first ``K_i`` rows of its own seeded permutation (no row is
    ever duplicated).
    """
    if spec.n_classes != pool.n_classes:
        raise InputError(f"{spec} describes {spec.n_classes} classes but the pool has {pool.n_classes}")
    rng = np.random.default_rng(seed)
    sizes = profile(spec)[rng.permutation(spec.n_classes)]
    return _subsample(pool, dict(zip(pool.class_ids, sizes.tolist())), rng)


def induce_group_step(pool: ClassPool, group: str, k_min: int, k_max: int, seed: int = 0) -> ClassPool:
    """Classes tagged ``group`` keep ``k_min`` samples, all others ``k_max``."""
    if group not in pool.known_groups:
        raise InputError(f"unknown group {group!r}; known groups: {', '.join(pool.known_groups)}")
    if not 1 <= k_min <= k_max:
        raise InputError("group step needs 1 <= k_min <= k_max")
    targets = {cid: (k_min if g == group else k_max) for cid, g in pool.groups.items()}
    return _subsample(pool, targets, np.random.default_rng(seed))


# ---------------------------------------------------------------- manifest
#
# Line-oriented UTF-8 text, version 1:
#
#   IMBFSL-MANIFEST 1 dim=<d> [groups=<g,...>] [<key>=<value> ...]
#   <class_id> <group> <v_1>,<v_2>,...,<v_d>
#   ...
#
# One record per sample, fields separated by a single space. Values use
# Python's shortest round-trip float repr, so loading reproduces every bit.
# Classes appear in order of first occurrence. Blank lines and lines starting
# with '#' after the header are ignored. Extra header keys (config hash, seed)
# are carried as metadata and do not affect the pool.

MANIFEST_MAGIC = "IMBFSL-MANIFEST"
MANIFEST_VERSION = 1


def dump_manifest(pool: ClassPool, meta: dict | None = None) -> str:
    out = io.StringIO()
    header = [MANIFEST_MAGIC, str(MANIFEST_VERSION), f"dim={pool.dim}",
              "groups=" + ",".join(pool.known_groups)]
    for key in sorted(meta or {}):
        value = str(meta[key])
        if key in ("dim", "groups") or any(c.isspace() or c == "=" for c in key + value):
            raise InputError(f"bad manifest header entry {key}={value}")
        header.append(f"{key}={value}")
    out.write(" ".join(header) + "\n")
    for cid, x in pool.classes.items():
        prefix = f"{cid} {pool.groups[cid]} "
        for row in x:
            out.write(prefix + ",".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


def parse_manifest(text: str, path=None) -> tuple[ClassPool, dict]:
    lines = text.split("\n")
    head = lines[0].split() if lines else []
    if head[:2] != [MANIFEST_MAGIC, str(MANIFEST_VERSION)]:
        raise ParseError(f"expected header '{MANIFEST_MAGIC} {MANIFEST_VERSION} dim=<d>'", 1, path)
    meta = {}
    for item in head[2:]:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ParseError(f"bad header field {item!r}", 1, path)
        meta[key] = value
    try:
        dim = int(meta.pop("dim"))
    except (KeyError, ValueError):
        raise ParseError("header needs an integer dim=<d>", 1, path) from None
    if dim < 1:
        raise ParseError("dim must be positive", 1, path)
    known = tuple(g for g in meta.pop("groups", "").split(",") if g)

    rows: dict[str, list] = {}
    groups: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(" ")
        if len(parts) != 3 or not parts[0] or not parts[1]:
            raise ParseError("expected '<class_id> <group> <comma-separated values>'", lineno, path)
        cid, group, body = parts
        try:
            vec = [float(v) for v in body.split(",")] if body else []
        except ValueError:
            raise ParseError("non-numeric sample value", lineno, path) from None
        if len(vec) != dim:
            raise ParseError(f"sample has {len(vec)} values, header says dim={dim}", lineno, path)
        if groups.setdefault(cid, group) != group:
            raise ParseError(f"class {cid!r} tagged with two groups", lineno, path)
        rows.setdefault(cid, []).append(vec)
    if not rows:
        raise ParseError("manifest contains no samples", None, path)
    try:
        pool = ClassPool({c: np.array(v) for c, v in rows.items()}, groups, dim, known)
    except InputError as exc:
        raise ParseError(str(exc), None, path) from None
    return pool, meta


def save_manifest(pool: ClassPool, path, meta: dict | None = None) -> None:
    with open(os.fspath(path), "w", newline="\n") as fh:
        fh.write(dump_manifest(pool, meta))


def read_manifest(path) -> tuple[ClassPool, dict]:
    with open(os.fspath(path)) as fh:
        return parse_manifest(fh.read(), path=os.fspath(path))


def load_manifest(path) -> ClassPool:
    return read_manifest(path)[0]
