"""Few-shot learners on the shared MLP backbone.

Episodic learners (ProtoNet, MatchingNet, RelationNet, MAML, ProtoMAML) are
meta-trained on episodes; the pretraining learners (Baseline, Baseline++,
SimpleShot) train a classifier over all training classes on mini-batches and
only meet episodes at validation/test time.

Every learner answers ``predict_proba(state, episode) -> (n_query, n_way)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .episodes import Episode
from .errors import ContractError, InputError
from .numerics import BackboneConfig, ParamSet, Tensor

KINDS = ("baseline", "baseline_pp", "matching", "protonet", "relation", "simpleshot", "maml", "protomaml")
EPISODIC = ("matching", "protonet", "relation", "maml", "protomaml")

# (inner_lr, inner_steps, meta_batch) where the method defines them
_INNER_DEFAULTS = {"maml": (0.1, 10, 4), "protomaml": (0.01, 5, 1)}


@dataclass(frozen=True)
class LearnerConfig:
    kind: str
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    inner_lr: float | None = None
    inner_steps: int | None = None
    meta_batch: int | None = None
    finetune_steps: int = 100
    finetune_lr: float = 0.01
    optimizer: str = "adam"
    batch_size: int = 128
    relation_hidden: int = 32
    cosine_scale: float = 10.0
    train_n_way: int | None = None
    train_query: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))
        lr, steps, mb = _INNER_DEFAULTS.get(self.kind, (None, None, 1))
        for attr, default in (("inner_lr", lr), ("inner_steps", steps), ("meta_batch", mb)):
            if getattr(self, attr) is None:
                object.__setattr__(self, attr, default)
        if self.kind in _INNER_DEFAULTS:
            if not self.inner_lr > 0:
                raise InputError(f"{self.kind}: inner_lr must be > 0")
            if self.inner_steps < 0:
                raise InputError(f"{self.kind}: inner_steps must be >= 0")
        if self.meta_batch < 1:
            raise InputError("meta_batch must be >= 1")
        if self.finetune_steps < 0 or self.batch_size < 1:
            raise InputError("finetune_steps must be >= 0 and batch_size >= 1")
        if self.name is None:
            object.__setattr__(self, "name", self.kind)

    @property
    def episodic(self) -> bool:
        return self.kind in EPISODIC

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "LearnerConfig":
        d = json.loads(text)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)


@dataclass
class LearnerState:
    params: ParamSet
    aux: dict = field(default_factory=dict)

    def copy(self) -> "LearnerState":
        aux = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.aux.items()}
        return LearnerState(self.params.copy(), aux)


# ---------------------------------------------------------------- shared pieces

def embed(params: ParamSet, x, activation="relu") -> Tensor:
    return nm.forward_embed(params, x, activation)


def embed_episode(params: ParamSet, ep: Episode) -> tuple[Tensor, Tensor]:
    """One forward pass over support+query, split back into the two sets."""
    n_s = len(ep.support_x)
    emb = embed(params, np.concatenate([ep.support_x, ep.query_x]))
    return nm.take_rows(emb, 0, n_s), nm.take_rows(emb, n_s, emb.shape[0])


def class_mean_matrix(labels: np.ndarray, n_way: int) -> np.ndarray:
    """(n_way, n) matrix whose product with per-sample rows gives class means."""
    onehot = np.eye(n_way)[labels].T
    counts = onehot.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise InputError("every class needs at least one support sample")
    return onehot / counts


def prototypes(emb_support: Tensor, labels: np.ndarray, n_way: int) -> Tensor:
    return nm.matmul(class_mean_matrix(labels, n_way), emb_support)


def linear_head(params: ParamSet, emb: Tensor) -> Tensor:
    return emb @ params["head.weight"].T + params["head.bias"]


def cosine_head(params: ParamSet, emb: Tensor, scale: float) -> Tensor:
    return scale * (nm.l2_normalize(emb) @ nm.l2_normalize(params["head.weight"]).T)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _add_head(params: ParamSet, n_out: int, embed_dim: int, rng, bias=True) -> None:
    w, b = nm.init_linear(embed_dim, n_out, rng)
    params["head.weight"] = w.T.copy()
    if bias:
        params["head.bias"] = b


# ---------------------------------------------------------------- metric learners

def protonet_logits(state: LearnerState, episode: Episode) -> Tensor:
    """Negative squared distance from each query embedding to each class prototype."""
    emb_s, emb_q = embed_episode(state.params, episode)
    return -nm.sqdist(emb_q, prototypes(emb_s, episode.support_y, episode.n_way))


def matching_logits(state: LearnerState, episode: Episode) -> Tensor:
    """Log of the cosine-attention mass each class receives.

    Attention over the support set is the softmax of query/support cosine
    similarities; softmax of the returned logits gives back the class masses.
    """
    emb_s, emb_q = embed_episode(state.params, episode)
    sims = nm.l2_normalize(emb_q) @ nm.l2_normalize(emb_s).T
    mass = nm.softmax(sims) @ np.eye(episode.n_way)[episode.support_y]
    return nm.log(mass)


def relation_scores(params: ParamSet, emb_q: Tensor, protos: Tensor) -> Tensor:
    n_q, n_way = emb_q.shape[0], protos.shape[0]
    pick_q = np.repeat(np.eye(n_q), n_way, axis=0)
    pick_c = np.tile(np.eye(n_way), (n_q, 1))
    pairs = nm.concat([nm.matmul(pick_q, emb_q), nm.matmul(pick_c, protos)], axis=1)
    return nm.mlp(params, pairs, "relation").reshape(n_q, n_way)


def relation_logits(state: LearnerState, episode: Episode) -> Tensor:
    """Learned relation score between each query and each class prototype."""
    emb_s, emb_q = embed_episode(state.params, episode)
    return relation_scores(state.params, emb_q, prototypes(emb_s, episode.support_y, episode.n_way))


# ---------------------------------------------------------------- MAML family

def _inner_loop(fast: ParamSet, x, y, classify, inner_lr, inner_steps, trace=None) -> ParamSet:
    for _ in range(inner_steps):
        loss = nm.softmax_cross_entropy(classify(fast, x), y)
        nm.backward(loss)
        if trace is not None:
            trace.append(loss.item())
        fast = ParamSet({k: t.data - inner_lr * t.grad for k, t in fast.items()})
    return fast


def _maml_classify(params, x):
    return linear_head(params, embed(params, x))


def maml_adapt(state: LearnerState, support: tuple, inner_lr: float, inner_steps: int,
               trace: list | None = None) -> ParamSet:
    """Plain gradient descent on the support cross-entropy from ``state.params``.

    Returns a fresh ParamSet; ``state`` is left untouched. Support losses
    before each step are appended to ``trace`` when given.
    """
    x, y = support
    return _inner_loop(state.params.copy(), x, y, _maml_classify, inner_lr, inner_steps, trace)


def protomaml_head(emb_support: Tensor, labels, n_way: int) -> tuple[Tensor, Tensor]:
    """Linear head equal to ProtoNet up to a per-query constant.

    ``-|e - p|^2 = 2 p.e - |p|^2 - |e|^2``, so weights ``2p`` and bias ``-|p|^2``
    rank classes exactly as the prototype distances do.
    """
    protos = prototypes(emb_support, labels, n_way)
    return 2.0 * protos, -nm.tsum(nm.square(protos), axis=1)


def protomaml_adapt(state: LearnerState, episode: Episode, inner_lr: float, inner_steps: int,
                    trace: list | None = None) -> ParamSet:
    """Backbone copy plus prototype-initialized head, adapted on the support set."""
    fast, _ = _protomaml_start(state.params, episode)
    return _inner_loop(fast, episode.support_x, episode.support_y, _maml_classify,
                       inner_lr, inner_steps, trace)


def _protomaml_start(params: ParamSet, episode: Episode):
    emb_s = embed(params, episode.support_x)
    w0, b0 = protomaml_head(emb_s, episode.support_y, episode.n_way)
    fast = params.copy()
    fast["head.weight"] = w0.data.copy()
    fast["head.bias"] = b0.data.copy()
    return fast, (w0, b0)


# ---------------------------------------------------------------- SimpleShot / baselines

def cl2n(features: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Center by the training-set mean, then L2-normalize each row."""
    centered = features - mean
    norms = np.sqrt(np.einsum("ij,ij->i", centered, centered) + 1e-24)
    return centered / norms[:, None]


def simpleshot_scores(state: LearnerState, episode: Episode) -> np.ndarray:
    if "feature_mean" not in state.aux:
        raise ContractError("SimpleShot state has no stored training feature mean")
    mean = state.aux["feature_mean"]
    emb_s, emb_q = (t.data for t in embed_episode(state.params, episode))
    s, q = cl2n(emb_s, mean), cl2n(emb_q, mean)
    protos = class_mean_matrix(episode.support_y, episode.n_way) @ s
    return -nm.kernels.sqdist(q, protos)


def simpleshot_classify(state: LearnerState, episode: Episode) -> np.ndarray:
    """Nearest CL2N prototype for every query sample."""
    return np.argmax(simpleshot_scores(state, episode), axis=1)


def pretrain_logits(params: ParamSet, x, cosine: bool, scale: float) -> Tensor:
    emb = embed(params, x)
    return cosine_head(params, emb, scale) if cosine else linear_head(params, emb)


def baseline_pretrain_step(state: LearnerState, minibatch: tuple, optimizer, lr: float,
                           cosine: bool = False, scale: float = 10.0) -> float:
    """One optimizer step of cross-entropy over all training classes."""
    x, y = minibatch
    n_classes = state.params["head.weight"].shape[0]
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"minibatch label outside [0, {n_classes})")
    state.params.zero_grad()
    loss = nm.softmax_cross_entropy(pretrain_logits(state.params, x, cosine, scale), y)
    nm.backward(loss)
    optimizer.step(state.params, lr)
    return loss.item()


def baseline_finetune(state: LearnerState, episode: Episode, steps: int, lr: float,
                      cosine: bool = False, scale: float = 10.0) -> np.ndarray:
    """Query probabilities from a fresh n-way head fitted on frozen support embeddings.

    The linear head starts at zero and the cosine head at the normalized class
    means of the support embeddings; both starts are label-symmetric, so the
    fitted head does not depend on how local labels are numbered.
    """
    emb_s, emb_q = (t.data for t in embed_episode(state.params, episode))
    n_way = episode.n_way
    head = ParamSet()
    if cosine:
        head["head.weight"] = class_mean_matrix(episode.support_y, n_way) @ emb_s
    else:
        head["head.weight"] = np.zeros((n_way, emb_s.shape[1]))
        head["head.bias"] = np.zeros(n_way)

    def logits(h, e):
        e = Tensor(e)
        return cosine_head(h, e, scale) if cosine else linear_head(h, e)

    opt = nm.Adam(lr)
    for _ in range(steps):
        loss = nm.softmax_cross_entropy(logits(head, emb_s), episode.support_y)
        nm.backward(loss)
        opt.step(head)
    return _softmax_np(logits(head, emb_q).data)


# ---------------------------------------------------------------- learner objects

class Learner:
    """Binds a LearnerConfig to initialization, training and prediction."""

    def __init__(self, cfg: LearnerConfig):
        self.cfg = cfg

    @property
    def kind(self) -> str:
        return self.cfg.kind

    @property
    def episodic(self) -> bool:
        return self.cfg.episodic

    def init_state(self, seed: int, n_train_classes: int, n_way: int) -> LearnerState:
        rng = np.random.default_rng(seed)
        params = nm.init_backbone(self.cfg.backbone, rng)
        self._init_extra(params, rng, n_train_classes, n_way)
        return LearnerState(params, self._init_aux(n_train_classes))

    def _init_extra(self, params, rng, n_train_classes, n_way):
        pass

    def _init_aux(self, n_train_classes) -> dict:
        return {}

    # episodic learners override task_logits or accumulate_task_grad
    def task_logits(self, state: LearnerState, episode: Episode) -> Tensor:
        raise NotImplementedError

    def accumulate_task_grad(self, state: LearnerState, episode: Episode) -> float:
        """Add this episode's meta-gradient into ``state.params[*].grad``."""
        loss = nm.softmax_cross_entropy(self.task_logits(state, episode), episode.query_y)
        nm.backward(loss)
        return loss.item()

    def predict_proba(self, state: LearnerState, episode: Episode) -> np.ndarray:
        return _softmax_np(self.task_logits(state, episode).data)

    def refresh_aux(self, state: LearnerState, train_pool) -> None:
        """Recompute state derived from the training pool (no-op by default)."""


class ProtoNet(Learner):
    def task_logits(self, state, episode):
        return protonet_logits(state, episode)


class MatchingNet(Learner):
    def task_logits(self, state, episode):
        return matching_logits(state, episode)


class RelationNet(Learner):
    def _init_extra(self, params, rng, n_train_classes, n_way):
        e, h = self.cfg.backbone.embed_dim, self.cfg.relation_hidden
        for i, (d_in, d_out) in enumerate([(2 * e, h), (h, 1)]):
            w, b = nm.init_linear(d_in, d_out, rng)
            params[f"relation.{i}.weight"] = w
            params[f"relation.{i}.bias"] = b

    def task_logits(self, state, episode):
        return relation_logits(state, episode)


class MAML(Learner):
    def _init_extra(self, params, rng, n_train_classes, n_way):
        _add_head(params, n_way, self.cfg.backbone.embed_dim, rng)

    def _check_way(self, state, episode):
        n_out = state.params["head.weight"].shape[0]
        if n_out != episode.n_way:
            raise InputError(f"MAML head has {n_out} outputs but the episode is {episode.n_way}-way")

    def adapt(self, state, episode, trace=None) -> ParamSet:
        self._check_way(state, episode)
        return maml_adapt(state, (episode.support_x, episode.support_y),
                          self.cfg.inner_lr, self.cfg.inner_steps, trace)

    def accumulate_task_grad(self, state, episode):
        fast = self.adapt(state, episode)
        loss = nm.softmax_cross_entropy(_maml_classify(fast, episode.query_x), episode.query_y)
        nm.backward(loss)
        for name, t in state.params.items():
            g = fast[name].grad
            t.grad = g.copy() if t.grad is None else t.grad + g
        return loss.item()

    def predict_proba(self, state, episode):
        fast = self.adapt(state, episode)
        return _softmax_np(_maml_classify(fast, episode.query_x).data)


class ProtoMAML(Learner):
    """First-order ProtoMAML.

    The meta-gradient is the query-loss gradient at the adapted backbone plus
    the head gradient pushed back through the prototype initialization at the
    original parameters; the inner trajectory itself is not differentiated.
    With zero inner steps this equals the ProtoNet gradient exactly.
    """

    def adapt(self, state, episode, trace=None) -> ParamSet:
        return protomaml_adapt(state, episode, self.cfg.inner_lr, self.cfg.inner_steps, trace)

    def accumulate_task_grad(self, state, episode):
        fast, (w0, b0) = _protomaml_start(state.params, episode)
        fast = _inner_loop(fast, episode.support_x, episode.support_y, _maml_classify,
                           self.cfg.inner_lr, self.cfg.inner_steps)
        loss = nm.softmax_cross_entropy(_maml_classify(fast, episode.query_x), episode.query_y)
        nm.backward(loss)
        # route the head gradient into the prototype-init graph at the original params
        surrogate = nm.tsum(w0 * fast["head.weight"].grad) + nm.tsum(b0 * fast["head.bias"].grad)
        nm.backward(surrogate)
        for name, t in state.params.items():
            g = fast[name].grad
            t.grad = g.copy() if t.grad is None else t.grad + g
        return loss.item()

    def predict_proba(self, state, episode):
        fast = self.adapt(state, episode)
        return _softmax_np(_maml_classify(fast, episode.query_x).data)


class Baseline(Learner):
    cosine = False

    def _init_extra(self, params, rng, n_train_classes, n_way):
        _add_head(params, n_train_classes, self.cfg.backbone.embed_dim, rng, bias=not self.cosine)

    def _init_aux(self, n_train_classes):
        return {"n_classes": int(n_train_classes)}

    def pretrain_step(self, state, minibatch, optimizer, lr) -> float:
        return baseline_pretrain_step(state, minibatch, optimizer, lr, self.cosine, self.cfg.cosine_scale)

    def predict_proba(self, state, episode):
        return baseline_finetune(state, episode, self.cfg.finetune_steps, self.cfg.finetune_lr,
                                 self.cosine, self.cfg.cosine_scale)


class BaselinePP(Baseline):
    cosine = True


class SimpleShot(Baseline):
    def _init_aux(self, n_train_classes):
        return {"n_classes": int(n_train_classes), "feature_mean": np.zeros(self.cfg.backbone.embed_dim)}

    def refresh_aux(self, state, train_pool):
        xs, _ = train_pool.flat
        state.aux["feature_mean"] = embed(state.params, xs).data.mean(axis=0)

    def predict_proba(self, state, episode):
        return _softmax_np(simpleshot_scores(state, episode))


_CLASSES = {
    "baseline": Baseline, "baseline_pp": BaselinePP, "matching": MatchingNet,
    "protonet": ProtoNet, "relation": RelationNet, "simpleshot": SimpleShot,
    "maml": MAML, "protomaml": ProtoMAML,
}


def make_learner(cfg: LearnerConfig | str) -> Learner:
    if isinstance(cfg, str):
        cfg = LearnerConfig(cfg)
    return _CLASSES[cfg.kind](cfg)


# ---------------------------------------------------------------- checkpoints

def save_state(path, cfg: LearnerConfig, state: LearnerState, meta: dict | None = None) -> None:
    """Parameter checkpoint plus an aux section (arrays as ``aux.*`` tensors)."""
    nm.save_params(path, *_checkpoint_parts(cfg, state, meta))


def _checkpoint_parts(cfg, state, meta):
    params = ParamSet({k: t.data for k, t in state.params.items()})
    out_meta = dict(meta or {})
    out_meta["learner_config"] = cfg.to_json()
    for key, value in state.aux.items():
        if isinstance(value, np.ndarray):
            params[f"aux.{key}"] = value
        else:
            out_meta[f"aux.{key}"] = json.dumps(value)
    return params, out_meta


def load_state(path) -> tuple[LearnerConfig, LearnerState, dict]:
    params, meta = nm.load_params(path)
    try:
        cfg = LearnerConfig.from_json(meta.pop("learner_config"))
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: not a learner checkpoint ({exc})") from None
    aux = {}
    for name in [n for n in params.names() if n.startswith("aux.")]:
        aux[name[4:]] = params[name].data
    for key in [k for k in meta if k.startswith("aux.")]:
        aux[key[4:]] = json.loads(meta.pop(key))
    kept = ParamSet({n: t.data for n, t in params.items() if not n.startswith("aux.")})
    return cfg, LearnerState(kept, aux), meta
