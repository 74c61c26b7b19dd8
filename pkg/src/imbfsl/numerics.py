"""Dense float64 tensors with reverse-mode differentiation, the MLP backbone
shared by every learner, optimizers, and the parameter checkpoint format.

The graph is recorded eagerly: each op returns a new :class:`Tensor` holding
references to its parents and a closure mapping the output gradient to parent
gradients. :func:`backward` walks the graph once in reverse topological order.
Gradients *accumulate* into ``Tensor.grad`` across calls until cleared with
:meth:`ParamSet.zero_grad` or by an optimizer step.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, InputError, ParseError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=requires_grad, name=self.name)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------- reductions / shape

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), fn)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return _node(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], (a,), fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: cannot multiply {_label(a, 'lhs')} {a.shape} by {_label(b, 'rhs')} {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sqdist(a, b) -> Tensor:
    """Pairwise squared Euclidean distance between the rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"sqdist: row dimensions differ: {a.shape} vs {b.shape}")
    return _node(kernels.sqdist(a.data, b.data), (a, b),
                 lambda g: kernels.sqdist_bwd(g, a.data, b.data))


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Row-wise ``x / sqrt(|x|^2 + eps^2)``; smooth at the origin."""
    a = as_tensor(a)
    y, d = kernels.l2norm_rows(a.data, eps)
    return _node(y, (a,), lambda g: (kernels.l2norm_rows_bwd(g, a.data, d),))


def softmax(a) -> Tensor:
    """Softmax over the last axis of a 2-D tensor."""
    a = as_tensor(a)
    z = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    out = z / z.sum(axis=1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (a,), fn)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"label out of range [0, {n_classes}): {labels.tolist()}")
    loss, dlogits = kernels.xent(logits.data, labels)
    return _node(np.asarray(loss), (logits,), lambda g: (g * dlogits,))


def _label(t: Tensor, default: str) -> str:
    return repr(t.name) if t.name else default


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Repeated calls add to existing gradients rather than overwrite them.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() on a tensor that does not depend on any parameter")
    pending = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node))
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------- parameters

class ParamSet:
    """Named learnable tensors; iteration is always in sorted-name order."""

    def __init__(self, tensors: dict | None = None):
        self._t: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        t.name = name
        self._t[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self):
        return iter(sorted(self._t))

    def names(self) -> list[str]:
        return sorted(self._t)

    def items(self):
        return [(k, self._t[k]) for k in sorted(self._t)]

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self._t.items() if k.startswith(prefix)})

    def copy(self, requires_grad: bool = True) -> "ParamSet":
        """Deep copy detached from any graph."""
        return ParamSet({k: v.detach(requires_grad) for k, v in self._t.items()})

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self._t[k].data.copy() for k in sorted(self._t)}

    def num_values(self) -> int:
        return sum(t.size for t in self._t.values())

    def allclose(self, other: "ParamSet", atol=0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(np.allclose(self[k].data, other[k].data, rtol=0, atol=atol) for k in self)


# ---------------------------------------------------------------- backbone

# Backbones use relu; forward_embed also accepts "none" for linear probes.
ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int = 16
    hidden_dims: tuple = (64, 64)
    embed_dim: int = 32
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise InputError("input_dim must be positive")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise InputError("backbone needs at least one positive hidden layer")
        if self.embed_dim < 2:
            raise InputError("embed_dim must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.embed_dim]


def init_linear(fan_in: int, fan_out: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone") -> ParamSet:
    params = ParamSet()
    dims = cfg.layer_dims
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        w, b = init_linear(d_in, d_out, rng)
        params[f"{prefix}.{i}.weight"] = w
        params[f"{prefix}.{i}.bias"] = b
    return params


def _layers(params: ParamSet, prefix: str) -> list[tuple[Tensor, Tensor]]:
    layers, i = [], 0
    while f"{prefix}.{i}.weight" in params:
        layers.append((params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"]))
        i += 1
    if not layers:
        raise ContractError(f"no layers named '{prefix}.<i>.weight' in parameter set")
    return layers


def mlp(params: ParamSet, x, prefix: str, activation: str = "relu") -> Tensor:
    """Stack of affine layers ``prefix.<i>``, activation between (not after) them."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"input to '{prefix}' must be 2-D, got shape {x.shape}")
    layers = _layers(params, prefix)
    h = x
    for i, (w, b) in enumerate(layers):
        if h.shape[1] != w.shape[0]:
            what = "input x" if i == 0 else f"output of layer {i - 1}"
            raise DimensionError(
                f"{what} has {h.shape[1]} columns but {w.name!r} expects {w.shape[0]}")
        h = h @ w + b
        if i < len(layers) - 1 and activation == "relu":
            h = relu(h)
    return h


def forward_embed(params: ParamSet, x, activation: str = "relu") -> Tensor:
    """Embed rows of ``x`` with the ``backbone.*`` layers of ``params``.

    ``activation="none"`` drops the nonlinearity, leaving an affine map.
    """
    if activation not in ("relu", "none"):
        raise InputError(f"activation must be 'relu' or 'none', got {activation!r}")
    return mlp(params, x, "backbone", activation)


# ---------------------------------------------------------------- optimizers

def _check_grads(params: ParamSet) -> None:
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise ContractError("optimizer step without gradient for: " + ", ".join(missing))


class SGD:
    def __init__(self, lr: float = 0.01):
        self.lr = lr

    def step(self, params: ParamSet, lr: float | None = None) -> None:
        _check_grads(params)
        lr = self.lr if lr is None else lr
        for _, t in params.items():
            t.data -= lr * t.grad
            t.grad = None


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, lr: float | None = None) -> None:
        _check_grads(params)
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            kernels.adam_update(p.data, p.grad, self.m[name], self.v[name],
                                lr, self.beta1, self.beta2, self.eps, self.t)
            p.grad = None


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise InputError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- checkpoints
#
# Text format, version 1. One header line, then any number of meta lines sorted
# by key, then one block per tensor in sorted-name order, then "end":
#
#   IMBFSL-PARAMS 1
#   meta <key> <value>
#   tensor <name> <ndim> <dim_1> ... <dim_ndim>
#   <v_1> <v_2> ... <v_size>          (single line, '%.17e' each, C order)
#   end
#
# Names and meta keys contain no whitespace; meta values run to end of line.
# '%.17e' round-trips float64 exactly, so save->load->save is byte-identical.

PARAMS_MAGIC = "IMBFSL-PARAMS"
PARAMS_VERSION = 1


def _fmt(values: np.ndarray) -> str:
    return " ".join("%.17e" % v for v in values.reshape(-1))


def dump_params(params: ParamSet, meta: dict | None = None) -> str:
    out = io.StringIO()
    out.write(f"{PARAMS_MAGIC} {PARAMS_VERSION}\n")
    for key in sorted(meta or {}):
        value = str(meta[key])
        if not key or any(c.isspace() for c in key) or "\n" in value:
            raise InputError(f"bad checkpoint meta entry {key!r}")
        out.write(f"meta {key} {value}\n")
    for name, t in params.items():
        dims = " ".join(str(d) for d in t.shape)
        out.write(f"tensor {name} {t.ndim}{' ' + dims if dims else ''}\n")
        out.write(_fmt(t.data) + "\n")
    out.write("end\n")
    return out.getvalue()


def parse_params(text: str, path=None) -> tuple[ParamSet, dict]:
    lines = text.split("\n")
    if not lines or lines[0].split() != [PARAMS_MAGIC, str(PARAMS_VERSION)]:
        raise ParseError(f"expected header '{PARAMS_MAGIC} {PARAMS_VERSION}'", 1, path)
    params, meta = ParamSet(), {}
    i = 1
    while i < len(lines):
        line, lineno = lines[i], i + 1
        if line == "end":
            return params, meta
        if line.startswith("meta "):
            parts = line.split(" ", 2)
            if len(parts) < 2 or not parts[1]:
                raise ParseError("meta line needs a key", lineno, path)
            meta[parts[1]] = parts[2] if len(parts) == 3 else ""
            i += 1
            continue
        if line.startswith("tensor "):
            parts = line.split()
            try:
                ndim = int(parts[2])
                shape = tuple(int(d) for d in parts[3:3 + ndim])
            except (IndexError, ValueError):
                raise ParseError(f"bad tensor header {line!r}", lineno, path) from None
            if len(shape) != ndim or len(parts) != 3 + ndim:
                raise ParseError(f"tensor header shape does not match ndim: {line!r}", lineno, path)
            if i + 1 >= len(lines):
                raise ParseError("missing values line", lineno + 1, path)
            try:
                values = np.array([float(v) for v in lines[i + 1].split()], dtype=DTYPE)
            except ValueError:
                raise ParseError("non-numeric value", lineno + 1, path) from None
            if values.size != int(np.prod(shape)):
                raise ParseError(
                    f"tensor {parts[1]!r} expects {int(np.prod(shape))} values, got {values.size}",
                    lineno + 1, path)
            if parts[1] in params:
                raise ParseError(f"duplicate tensor name {parts[1]!r}", lineno, path)
            params[parts[1]] = values.reshape(shape)
            i += 2
            continue
        raise ParseError(f"unexpected line {line!r}", lineno, path)
    raise ParseError("missing 'end' line", len(lines), path)


def save_params(path, params: ParamSet, meta: dict | None = None) -> None:
    with open(os.fspath(path), "w", newline="\n") as fh:
        fh.write(dump_params(params, meta))


def load_params(path) -> tuple[ParamSet, dict]:
    with open(os.fspath(path)) as fh:
        return parse_params(fh.read(), path=os.fspath(path))

