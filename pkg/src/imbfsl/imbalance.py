"""Class-size profiles for balanced, linear, step and long-tail imbalance.

A profile lists the number of samples for classes ``i = 1..N``; minority
classes occupy the lowest indices. Which real class receives which entry is
decided downstream by a seeded permutation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import InputError

KINDS = ("balanced", "linear", "step", "longtail")

# Offset that widens the linear ramp by just under half a sample at each end, so
# that rounding gives every integer in [k_min, k_max] a near-equal share.
LINEAR_ROUNDING_OFFSET = 0.499
DEFAULT_POWER = 10.0


@dataclass(frozen=True)
class ImbalanceSpec:
    kind: str
    k_min: int
    k_max: int
    n_classes: int
    m_minority: int | None = None
    power: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown imbalance kind {self.kind!r}; expected one of {KINDS}")
        if self.k_min < 1 or self.k_max < 1 or self.n_classes < 1:
            raise InputError(f"{self}: sizes and class count must be positive")
        if self.k_min > self.k_max:
            raise InputError(f"{self}: k_min exceeds k_max")
        if self.kind == "balanced" and self.k_min != self.k_max:
            raise InputError(f"{self}: balanced requires k_min == k_max")
        if self.kind == "step":
            if self.m_minority is None or not 0 <= self.m_minority <= self.n_classes:
                raise InputError(f"{self}: step needs 0 <= m_minority <= n_classes")
        elif self.m_minority is not None:
            raise InputError(f"{self}: m_minority only applies to step imbalance")
        if self.kind == "longtail":
            if self.power is None:
                object.__setattr__(self, "power", DEFAULT_POWER)
            if self.power < 1:
                raise InputError(f"{self}: long-tail power must be >= 1")
        elif self.power is not None:
            raise InputError(f"{self}: power only applies to long-tail imbalance")

    def __str__(self):
        args = [self.k_min, self.k_max, self.n_classes]
        if self.kind == "step":
            args.append(self.m_minority)
        elif self.kind == "longtail" and self.power != DEFAULT_POWER:
            args.append(_fmt_num(self.power))
        return f"{self.kind}({','.join(str(a) for a in args)})"

    @property
    def is_balanced(self) -> bool:
        return self.k_min == self.k_max or (
            self.kind == "step" and self.m_minority in (0, self.n_classes))

    def sizes(self) -> np.ndarray:
        return profile(self)


def balanced(k: int, n: int) -> ImbalanceSpec:
    return ImbalanceSpec("balanced", k, k, n)


def linear(k_min: int, k_max: int, n: int) -> ImbalanceSpec:
    return ImbalanceSpec("linear", k_min, k_max, n)


def step(k_min: int, k_max: int, n: int, m: int) -> ImbalanceSpec:
    return ImbalanceSpec("step", k_min, k_max, n, m_minority=m)


def longtail(k_min: int, k_max: int, n: int, power: float = DEFAULT_POWER) -> ImbalanceSpec:
    return ImbalanceSpec("longtail", k_min, k_max, n, power=float(power))


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def round_half_away(x):
    """Nearest integer, ties away from zero (numpy rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def linear_sizes(spec: ImbalanceSpec) -> np.ndarray:
    n, lo, hi = spec.n_classes, spec.k_min, spec.k_max
    if n == 1:
        # degenerate: no ramp to interpolate, keep the majority size
        return np.array([hi], dtype=np.int64)
    c = LINEAR_ROUNDING_OFFSET
    i = np.arange(n, dtype=np.float64)
    sizes = round_half_away(lo - c + i * (hi + 2 * c - lo) / (n - 1))
    return np.clip(sizes, lo, hi)


def step_sizes(spec: ImbalanceSpec) -> np.ndarray:
    m = spec.m_minority or 0
    sizes = np.full(spec.n_classes, spec.k_max, dtype=np.int64)
    sizes[:m] = spec.k_min
    return sizes


def longtail_sizes(spec: ImbalanceSpec) -> np.ndarray:
    """Power-law ramp ``k_min + (k_max - k_min) * ((i-1)/(N-1))**power``.

    With power 10 most classes sit near ``k_min`` and a small head carries
    most of the mass: for (20, 1300, 900) the mean is ~137 samples per class
    and the largest 20% of classes hold ~81% of all samples.
    """
    n, lo, hi = spec.n_classes, spec.k_min, spec.k_max
    if n == 1:
        return np.array([hi], dtype=np.int64)
    frac = np.arange(n, dtype=np.float64) / (n - 1)
    return np.clip(round_half_away(lo + (hi - lo) * frac**spec.power), lo, hi)


def profile(spec: ImbalanceSpec) -> np.ndarray:
    """Class sizes for any imbalance kind."""
    if spec.kind == "balanced":
        return np.full(spec.n_classes, spec.k_min, dtype=np.int64)
    if spec.kind == "linear":
        return linear_sizes(spec)
    if spec.kind == "step":
        return step_sizes(spec)
    return longtail_sizes(spec)


def imbalance_ratio(sizes) -> float:
    sizes = np.asarray(sizes)
    if sizes.size == 0:
        raise InputError("imbalance ratio of an empty profile")
    return float(sizes.max()) / float(sizes.min())


_SPEC_RE = re.compile(r"^\s*([a-z]+)\s*\(([^)]*)\)\s*$")


def parse_spec(text: str) -> ImbalanceSpec:
    """Parse ``kind(k_min,k_max,n[,m|p])``, e.g. ``step(25,444,64,22)``."""
    match = _SPEC_RE.match(text)
    if not match:
        raise InputError(f"cannot parse imbalance spec {text!r}; expected kind(k_min,k_max,n[,m|p])")
    kind, body = match.groups()
    parts = [p.strip() for p in body.split(",") if p.strip()]
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise InputError(f"non-numeric argument in {text!r}") from None
    if len(nums) == 2 and kind == "balanced":
        nums = [nums[0], nums[0], nums[1]]
    if len(nums) < 3:
        raise InputError(f"{text!r}: need at least k_min, k_max and n")
    ints = nums[:3]
    if any(not math.isfinite(v) or not v.is_integer() for v in ints):
        raise InputError(f"{text!r}: k_min, k_max and n must be integers")
    k_min, k_max, n = (int(v) for v in ints)
    extra = nums[3:]
    if kind == "step":
        if len(extra) != 1 or not extra[0].is_integer():
            raise InputError(f"{text!r}: step needs an integer minority count")
        return step(k_min, k_max, n, int(extra[0]))
    if kind == "longtail":
        if len(extra) > 1:
            raise InputError(f"{text!r}: too many arguments")
        return longtail(k_min, k_max, n, extra[0] if extra else DEFAULT_POWER)
    if extra:
        raise InputError(f"{text!r}: {kind} takes exactly three arguments")
    return ImbalanceSpec(kind, k_min, k_max, n)


def parse_shot(value) -> int | ImbalanceSpec:
    """A support-shot setting: a plain integer or an imbalance spec string."""
    if isinstance(value, ImbalanceSpec):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        if value < 1:
            raise InputError("shot must be >= 1")
        return int(value)
    text = str(value).strip()
    if text.isdigit():
        return parse_shot(int(text))
    return parse_spec(text)

