import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imbfsl import numerics as nm
from imbfsl.errors import ContractError, DimensionError, InputError, ParseError

from oracles import adam_scalar, central_diff, mlp_forward, rel_err, xent_scalar

GRAD_SEEDS = range(20)
FD_STEP = 1e-5
FD_TOL = 1e-4


def away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def _mlp_case(rng):
    cfg = nm.BackboneConfig(input_dim=3, hidden_dims=(4,), embed_dim=2)
    p = nm.init_backbone(cfg, rng)
    arrays = [p[n].data.copy() for n in p.names()] + [rng.normal(size=(5, 3))]
    names = p.names()

    def build(*ts):
        ps = nm.ParamSet(dict(zip(names, ts[:-1])))
        return nm.forward_embed(ps, ts[-1])

    return build, arrays


def _xent_case(rng):
    labels = rng.integers(0, 4, size=6)
    return (lambda a: nm.softmax_cross_entropy(a, labels)), [rng.normal(scale=2, size=(6, 4))]


# name -> rng -> (builder over Tensors, list of input arrays)
OP_CASES = {
    "add": lambda r: (nm.add, [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "add_broadcast_row": lambda r: (nm.add, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "add_broadcast_col": lambda r: (nm.add, [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    "sub_broadcast": lambda r: (nm.sub, [r.normal(size=(1, 4)), r.normal(size=(3, 4))]),
    "mul_broadcast": lambda r: (nm.mul, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "div": lambda r: (nm.div, [r.normal(size=(3, 4)), away_from_zero(r, (3, 4), 0.5)]),
    "neg": lambda r: (nm.neg, [r.normal(size=(2, 5))]),
    "relu": lambda r: (nm.relu, [away_from_zero(r, (4, 3))]),
    "exp": lambda r: (nm.exp, [r.normal(size=(3, 3))]),
    "log": lambda r: (nm.log, [r.uniform(0.5, 3.0, size=(3, 3))]),
    "square": lambda r: (nm.square, [r.normal(size=(4, 2))]),
    "sum_all": lambda r: (nm.tsum, [r.normal(size=(3, 4))]),
    "sum_axis0": lambda r: (lambda a: nm.tsum(a, axis=0), [r.normal(size=(3, 4))]),
    "sum_axis1_keep": lambda r: (lambda a: nm.tsum(a, axis=1, keepdims=True), [r.normal(size=(3, 4))]),
    "mean": lambda r: (nm.mean, [r.normal(size=(3, 4))]),
    "reshape": lambda r: (lambda a: nm.reshape(a, (2, 6)), [r.normal(size=(3, 4))]),
    "transpose": lambda r: (nm.transpose, [r.normal(size=(3, 4))]),
    "concat_rows": lambda r: (lambda a, b: nm.concat([a, b], 0), [r.normal(size=(2, 3)), r.normal(size=(4, 3))]),
    "concat_cols": lambda r: (lambda a, b: nm.concat([a, b], 1), [r.normal(size=(3, 2)), r.normal(size=(3, 1))]),
    "take_rows": lambda r: (lambda a: nm.take_rows(a, 1, 4), [r.normal(size=(5, 3))]),
    "matmul": lambda r: (nm.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "sqdist": lambda r: (nm.sqdist, [r.normal(size=(5, 3)), r.normal(size=(4, 3))]),
    "l2_normalize": lambda r: (nm.l2_normalize, [r.normal(size=(4, 3))]),
    "softmax": lambda r: (nm.softmax, [r.normal(size=(3, 5))]),
    "softmax_cross_entropy": lambda r: _xent_case(r),
    "mlp_backbone": _mlp_case,
}


def gradcheck(build, arrays, weight_rng):
    ts = [nm.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    weights = weight_rng.normal(size=out.shape)
    nm.backward(nm.tsum(nm.mul(out, weights)))
    analytic = [t.grad for t in ts]

    def scalar(*arrs):
        return float((build(*[nm.Tensor(a) for a in arrs]).data * weights).sum())

    numeric = central_diff(scalar, [a.copy() for a in arrays], FD_STEP)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(op):
    worst = 0.0
    for seed in GRAD_SEEDS:
        rng = np.random.default_rng(seed)
        build, arrays = OP_CASES[op](rng)
        worst = max(worst, gradcheck(build, arrays, rng))
    assert worst <= FD_TOL, f"{op}: worst relative error {worst:.3e} over {len(GRAD_SEEDS)} seeds"


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 2**31 - 1),
       bshape=st.sampled_from(["full", "row", "col", "scalar"]))
def test_broadcast_mul_gradient_property(rows, cols, seed, bshape):
    rng = np.random.default_rng(seed)
    shape = {"full": (rows, cols), "row": (cols,), "col": (rows, 1), "scalar": ()}[bshape]
    err = gradcheck(nm.mul, [rng.normal(size=(rows, cols)), rng.normal(size=shape)], rng)
    assert err <= FD_TOL


# ---------------------------------------------------------------- forward_embed


def test_zero_weight_network_embeds_to_zero():
    cfg = nm.BackboneConfig(input_dim=4, hidden_dims=(8, 8), embed_dim=3)
    p = nm.init_backbone(cfg, np.random.default_rng(0))
    for _, t in p.items():
        t.data[...] = 0.0
    out = nm.forward_embed(p, np.random.default_rng(1).normal(size=(6, 4)))
    assert np.array_equal(out.data, np.zeros((6, 3)))


def test_identity_single_layer_returns_input():
    p = nm.ParamSet({"backbone.0.weight": np.eye(3), "backbone.0.bias": np.zeros(3)})
    x = np.array([[1.0, -2.0, 3.5], [0.0, 0.25, -1.0]])
    assert np.array_equal(nm.forward_embed(p, x).data, x)


def test_seeded_network_matches_hand_rolled_forward():
    cfg = nm.BackboneConfig()
    p = nm.init_backbone(cfg, np.random.default_rng(0))
    x = np.random.default_rng(42).normal(size=(7, cfg.input_dim))
    ws = [p[f"backbone.{i}.weight"].data for i in range(3)]
    bs = [p[f"backbone.{i}.bias"].data for i in range(3)]
    np.testing.assert_allclose(nm.forward_embed(p, x).data, mlp_forward(ws, bs, x), rtol=0, atol=1e-12)


def test_init_is_uniform_within_fan_in_bound():
    w, b = nm.init_linear(24, 500, np.random.default_rng(3))
    bound = math.sqrt(6 / 24)
    assert w.shape == (24, 500) and np.all(np.abs(w) <= bound) and np.all(b == 0)
    assert abs(w.std() - bound / math.sqrt(3)) < 0.02


def test_forward_embed_is_linear_without_activation():
    cfg = nm.BackboneConfig(input_dim=5, hidden_dims=(7, 6), embed_dim=4)
    p = nm.init_backbone(cfg, np.random.default_rng(2))
    for i in range(3):  # nonzero biases would make the map affine, not linear
        p[f"backbone.{i}.bias"].data[...] = 0.0
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    a, b = 1.7, -0.4
    f = lambda v: nm.forward_embed(p, v, activation="none").data
    lhs, rhs = f(a * x + b * y), a * f(x) + b * f(y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_dimension_error_names_offending_tensor():
    p = nm.init_backbone(nm.BackboneConfig(input_dim=4, hidden_dims=(3,), embed_dim=2), np.random.default_rng(0))
    with pytest.raises(DimensionError, match="input x has 5 columns.*backbone.0.weight"):
        nm.forward_embed(p, np.zeros((2, 5)))
    with pytest.raises(DimensionError, match="'left'"):
        nm.matmul(nm.Tensor(np.zeros((2, 3)), name="left"), np.zeros((4, 2)))


@pytest.mark.parametrize("kwargs", [dict(hidden_dims=()), dict(embed_dim=1), dict(input_dim=0),
                                    dict(activation="none"), dict(hidden_dims=(4, 0))])
def test_backbone_config_rejects_invalid(kwargs):
    with pytest.raises(InputError):
        nm.BackboneConfig(**kwargs)


# ---------------------------------------------------------------- cross-entropy


def test_uniform_logits_give_log_c():
    for c in (2, 5, 17):
        loss = nm.softmax_cross_entropy(np.full((3, c), 0.7), [0, 1, c - 1])
        assert loss.item() == pytest.approx(math.log(c), abs=1e-14)


def test_large_margin_logits_give_near_zero_loss():
    logits = np.array([[50.0, 0, 0], [0, 0, 50.0]])
    assert nm.softmax_cross_entropy(logits, [0, 2]).item() < 1e-20


def test_two_by_two_cross_entropy_matches_scalar_formula():
    logits = [[1.0, 0.0], [0.0, 1.0]]
    expected = xent_scalar(logits, [0, 1])
    assert expected == pytest.approx(0.31326168751822286, abs=1e-15)
    assert nm.softmax_cross_entropy(np.array(logits), [0, 1]).item() == pytest.approx(expected, abs=1e-15)


def test_cross_entropy_matches_scalar_oracle_on_random_batches():
    rng = np.random.default_rng(11)
    for _ in range(20):
        logits = rng.normal(scale=5, size=(7, 4))
        labels = rng.integers(0, 4, size=7)
        got = nm.softmax_cross_entropy(logits, labels).item()
        assert got == pytest.approx(xent_scalar(logits.tolist(), labels.tolist()), rel=1e-13)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InputError, match="out of range"):
        nm.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(InputError):
        nm.softmax_cross_entropy(np.zeros((2, 3)), [-1, 0])
    with pytest.raises(DimensionError):
        nm.softmax_cross_entropy(np.zeros((2, 3)), [0, 1, 2])


# ---------------------------------------------------------------- backward


def test_sum_gives_ones_gradient():
    x = nm.Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    nm.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_half_squared_norm_gives_x():
    x = nm.Tensor(np.array([[1.5, -2.0], [0.25, 4.0]]), requires_grad=True)
    nm.backward(0.5 * nm.square(x).sum())
    assert np.array_equal(x.grad, x.data)


def test_mlp_cross_entropy_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    cfg = nm.BackboneConfig(input_dim=4, hidden_dims=(6, 5), embed_dim=3)
    p = nm.init_backbone(cfg, rng)
    x = rng.normal(size=(8, 4))
    y = rng.integers(0, 3, size=8)
    names = p.names()

    def loss_of(*arrs):
        ps = nm.ParamSet(dict(zip(names, arrs)))
        return nm.softmax_cross_entropy(nm.forward_embed(ps, x), y)

    nm.backward(loss_of(*[p[n] for n in names]))
    numeric = central_diff(lambda *a: loss_of(*[nm.Tensor(v) for v in a]).item(),
                           [p[n].data.copy() for n in names], FD_STEP)
    for n, g in zip(names, numeric):
        assert rel_err(p[n].grad, g) <= FD_TOL, n


def test_repeated_backward_accumulates():
    x = nm.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nm.backward(nm.square(x).sum())
    nm.backward(nm.square(x).sum())
    assert np.array_equal(x.grad, 4 * x.data)


def test_shared_subexpression_gradients_add_up():
    x = nm.Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    nm.backward((y + y * x).sum())  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(6 + 27)


def test_backward_requires_scalar_loss():
    x = nm.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError, match="scalar"):
        nm.backward(x * 2)
    with pytest.raises(ContractError):
        nm.backward(nm.Tensor(1.0))


def test_deep_chain_does_not_hit_recursion_limit():
    x = nm.Tensor(np.array([1.0]), requires_grad=True)
    h = x
    for _ in range(5000):
        h = h + 0.0
    nm.backward(h.sum())
    assert x.grad[0] == 1.0


def test_forward_and_gradients_are_bit_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = nm.init_backbone(nm.BackboneConfig(), rng)
        x = rng.normal(size=(10, 16))
        loss = nm.softmax_cross_entropy(nm.forward_embed(p, x), rng.integers(0, 32, size=10))
        nm.backward(loss)
        return loss.item(), [p[n].grad.copy() for n in p.names()]

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and all(np.array_equal(a, b) for a, b in zip(g1, g2))


# ---------------------------------------------------------------- optimizers


def test_sgd_unit_lr_subtracts_gradient():
    p = nm.ParamSet({"w": np.array([1.0, -2.0, 0.5])})
    g = np.array([0.25, 1.0, -3.0])
    p["w"].grad = g.copy()
    nm.SGD(lr=1.0).step(p)
    assert np.array_equal(p["w"].data, np.array([0.75, -3.0, 3.5]))
    assert p["w"].grad is None


@pytest.mark.parametrize("opt", [nm.SGD(0.5), nm.Adam(0.5)])
def test_zero_gradient_leaves_parameters_unchanged(opt):
    p = nm.ParamSet({"a": np.array([1.0, 2.0]), "b": np.array([[3.0]])})
    before = p.arrays()
    for _ in range(3):
        for _, t in p.items():
            t.grad = np.zeros_like(t.data)
        opt.step(p)
    assert all(np.array_equal(before[k], p[k].data) for k in before)


def test_adam_matches_scalar_oracle_on_quadratic():
    w0 = [1.0, -0.5, 2.0]
    trace = adam_scalar(w0, lambda w: [2 * v for v in w], lr=0.1, steps=100)
    p = nm.ParamSet({"w": np.array(w0)})
    opt = nm.Adam(lr=0.1)
    norms = [np.linalg.norm(w0)]
    for step in range(100):
        nm.backward(nm.square(p["w"]).sum())
        opt.step(p)
        np.testing.assert_allclose(p["w"].data, trace[step + 1], rtol=1e-12, atol=1e-14)
        norms.append(np.linalg.norm(p["w"].data))
    oracle_norms = [math.sqrt(sum(v * v for v in w)) for w in trace]
    # the trace is strictly decreasing while far from the optimum; Adam then oscillates near zero
    head = oracle_norms[:15]
    assert all(b < a for a, b in zip(head, head[1:]))
    np.testing.assert_allclose(norms, oracle_norms, rtol=1e-10, atol=1e-14)
    assert norms[-1] < 0.1 * norms[0]


def test_optimizer_reports_missing_gradients_by_name():
    p = nm.ParamSet({"head.weight": np.ones(2), "backbone.0.bias": np.ones(2)})
    p["head.weight"].grad = np.ones(2)
    for opt in (nm.SGD(), nm.Adam()):
        with pytest.raises(ContractError, match="backbone.0.bias"):
            opt.step(p)


def test_make_optimizer_rejects_unknown_kind():
    assert isinstance(nm.make_optimizer("adam", 1e-3), nm.Adam)
    with pytest.raises(InputError):
        nm.make_optimizer("rmsprop", 1e-3)


# ---------------------------------------------------------------- ParamSet and checkpoints


def test_paramset_iterates_in_sorted_order_and_copies_deeply():
    p = nm.ParamSet({"z": np.zeros(1), "a": np.ones(2), "m.1": np.ones(1)})
    assert list(p) == ["a", "m.1", "z"] and p.names() == list(p)
    q = p.copy()
    q["a"].data[0] = 9.0
    assert p["a"].data[0] == 1.0
    assert p.num_values() == 4 and p.subset("m.").names() == ["m.1"]


def test_checkpoint_round_trip_is_bit_exact_and_byte_stable(tmp_path):
    rng = np.random.default_rng(0)
    p = nm.init_backbone(nm.BackboneConfig(), rng)
    p["head.scale"] = np.array(np.pi)
    p["tiny"] = np.array([5e-324, -0.0, 1e308, 1 / 3])
    path = tmp_path / "ck.params"
    nm.save_params(path, p, {"seed": 3, "config_hash": "abc"})
    q, meta = nm.load_params(path)
    assert meta == {"seed": "3", "config_hash": "abc"}
    assert q.names() == p.names()
    for n in p:
        assert q[n].shape == p[n].shape and np.array_equal(q[n].data.view(np.int64), p[n].data.view(np.int64))
    assert nm.dump_params(q, meta) == path.read_text()


def test_checkpoint_layout_is_as_documented():
    p = nm.ParamSet({"b": np.array([[1.0, 2.0]]), "a": np.array(0.5)})
    text = nm.dump_params(p, {"k": "v w"})
    assert text == ("IMBFSL-PARAMS 1\nmeta k v w\n"
                    "tensor a 0\n5.00000000000000000e-01\n"
                    "tensor b 2 1 2\n1.00000000000000000e+00 2.00000000000000000e+00\nend\n")


@pytest.mark.parametrize("text,line", [
    ("NOPE 1\nend\n", 1),
    ("IMBFSL-PARAMS 1\ntensor a 1 2\n1.0\nend\n", 3),
    ("IMBFSL-PARAMS 1\ntensor a 1 2\n1.0 x\nend\n", 3),
    ("IMBFSL-PARAMS 1\ntensor a one 2\n1.0 2.0\nend\n", 2),
    ("IMBFSL-PARAMS 1\nbogus line\nend\n", 2),
    ("IMBFSL-PARAMS 1\ntensor a 1 1\n1.0\n", 4),
])
def test_checkpoint_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as info:
        nm.parse_params(text, path="ck.params")
    assert info.value.line == line
    assert str(info.value).startswith("ck.params:")
