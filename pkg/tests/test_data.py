from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imbfsl.data import (ClassPool, SplitSpec, SyntheticSpec, dump_manifest, gen_synthetic, induce_group_step,
                         induce_imbalance, load_manifest, parse_manifest, read_manifest, save_manifest,
                         split_classes)
from imbfsl.errors import CapacityError, InputError, ParseError
from imbfsl.imbalance import balanced, linear, profile, step

from oracles import nearest_mean_accuracy


@pytest.fixture(scope="module")
def pool64():
    return gen_synthetic(SyntheticSpec(n_classes=64, samples_per_class=600, dim=4, seed=1))


def _row_keys(x):
    return {tuple(r) for r in x}


# ---------------------------------------------------------------- generation


def test_same_seed_gives_bit_identical_pools():
    spec = SyntheticSpec(n_classes=6, samples_per_class=10, dim=3, n_groups=2, group_shift=2.0, seed=5)
    assert gen_synthetic(spec) == gen_synthetic(spec)
    assert gen_synthetic(spec) != gen_synthetic(SyntheticSpec(6, 10, 3, seed=6))


def test_generated_pool_layout():
    pool = gen_synthetic(SyntheticSpec(n_classes=7, samples_per_class=5, dim=3, n_groups=3))
    assert pool.class_ids == [f"c00{i}" for i in range(7)]
    assert pool.sizes.tolist() == [5] * 7 and pool.dim == 3
    assert [pool.groups[c] for c in pool.class_ids] == ["g0", "g1", "g2", "g0", "g1", "g2", "g0"]
    assert pool.known_groups == ("g0", "g1", "g2")


def test_large_separation_is_nearly_perfect_for_nearest_mean_oracle():
    pool = gen_synthetic(SyntheticSpec(n_classes=20, samples_per_class=200, dim=16, class_separation=10.0))
    xs = [pool.classes[c] for c in pool.class_ids]
    means = np.stack([x[:100].mean(0) for x in xs])
    held_x = np.concatenate([x[100:] for x in xs])
    held_y = np.repeat(np.arange(20), 100)
    assert nearest_mean_accuracy(means, held_x, held_y) > 0.99


def test_zero_separation_is_chance_level():
    pool = gen_synthetic(SyntheticSpec(n_classes=5, samples_per_class=400, dim=16, class_separation=0.0))
    xs = [pool.classes[c] for c in pool.class_ids]
    means = np.stack([x[:200].mean(0) for x in xs])
    acc = nearest_mean_accuracy(means, np.concatenate([x[200:] for x in xs]), np.repeat(np.arange(5), 200))
    # 1000 held-out points at p = 0.2: 3 sigma is about 0.038
    assert abs(acc - 0.2) < 0.04


def test_group_shift_moves_group_means():
    base = gen_synthetic(SyntheticSpec(12, 50, 4, class_separation=1.0, n_groups=2, seed=3))
    shifted = gen_synthetic(SyntheticSpec(12, 50, 4, class_separation=1.0, n_groups=2, group_shift=5.0, seed=3))
    delta = {c: shifted.classes[c] - base.classes[c] for c in base.class_ids}
    for c in base.class_ids:  # every sample of a class moves by the same group vector of length 5
        assert np.allclose(delta[c], delta[c][0]) and np.linalg.norm(delta[c][0]) == pytest.approx(5.0)
    assert np.allclose(delta["c000"][0], delta["c002"][0])
    assert not np.allclose(delta["c000"][0], delta["c001"][0])


@pytest.mark.parametrize("kwargs", [dict(n_classes=0), dict(samples_per_class=0), dict(dim=0),
                                    dict(class_separation=-1.0), dict(n_groups=0)])
def test_synthetic_spec_validation(kwargs):
    with pytest.raises(InputError):
        SyntheticSpec(**kwargs)


def test_pool_validation_and_immutability():
    with pytest.raises(InputError):
        ClassPool({}, {}, 2)
    with pytest.raises(InputError):
        ClassPool({"a b": np.zeros((1, 2))}, {"a b": "g"}, 2)
    with pytest.raises(InputError):
        ClassPool({"a": np.zeros((0, 2))}, {"a": "g"}, 2)
    with pytest.raises(InputError):
        ClassPool({"a": np.zeros((1, 3))}, {"a": "g"}, 2)
    with pytest.raises(InputError):
        ClassPool({"a": np.zeros((1, 2))}, {}, 2)
    src = np.zeros((2, 2))
    pool = ClassPool({"a": src}, {"a": "g"}, 2)
    src[0, 0] = 1.0
    assert pool.classes["a"][0, 0] == 0.0
    with pytest.raises(ValueError):
        pool.classes["a"][0, 0] = 2.0


def test_flat_view_labels_follow_pool_order():
    pool = ClassPool({"b": np.ones((2, 1)), "a": np.zeros((3, 1))}, {"b": "g", "a": "g"}, 1)
    xs, ys = pool.flat
    assert ys.tolist() == [0, 0, 1, 1, 1] and xs[:, 0].tolist() == [1, 1, 0, 0, 0]


# ---------------------------------------------------------------- splits


def test_split_sizes_and_disjointness():
    pool = gen_synthetic(SyntheticSpec(100, 2, 2))
    tr, va, te = split_classes(pool, SplitSpec(64, 16, 20, seed=0))
    ids = [set(p.class_ids) for p in (tr, va, te)]
    assert [len(s) for s in ids] == [64, 16, 20]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == set(pool.class_ids)
    assert tr.class_ids == sorted(tr.class_ids)  # original order kept


def test_all_train_split():
    pool = gen_synthetic(SyntheticSpec(10, 2, 2))
    tr, va, te = split_classes(pool, SplitSpec(10, 0, 0))
    assert tr.class_ids == pool.class_ids and va is None and te is None


def test_different_split_seeds_change_membership_not_sizes():
    pool = gen_synthetic(SyntheticSpec(100, 2, 2))
    a = split_classes(pool, SplitSpec(64, 16, 20, seed=0))
    b = split_classes(pool, SplitSpec(64, 16, 20, seed=1))
    assert [p.n_classes for p in a] == [p.n_classes for p in b]
    assert set(a[0].class_ids) != set(b[0].class_ids)


def test_split_needs_enough_classes():
    with pytest.raises(InputError, match="needs 11 classes"):
        split_classes(gen_synthetic(SyntheticSpec(10, 2, 2)), SplitSpec(5, 5, 1))
    with pytest.raises(InputError):
        SplitSpec(-1, 0, 0)


# ---------------------------------------------------------------- induction


def test_balanced_induction_gives_300_each(pool64):
    out = induce_imbalance(pool64, balanced(300, 64), seed=0)
    assert out.sizes.tolist() == [300] * 64 and out.total == 19200


def test_step_induction_sizes(pool64):
    out = induce_imbalance(pool64, step(25, 444, 64, 22), seed=3)
    assert Counter(out.sizes.tolist()) == {25: 22, 444: 42}


def test_linear_and_balanced_totals_within_half_percent(pool64):
    bal = induce_imbalance(pool64, balanced(300, 64), seed=0).total
    lin = induce_imbalance(pool64, linear(30, 570, 64), seed=0).total
    assert abs(lin - bal) / bal < 0.005


def test_induction_subsamples_without_duplication(pool64):
    out = induce_imbalance(pool64, linear(30, 570, 64), seed=9)
    for cid in out.class_ids:
        rows = _row_keys(out.classes[cid])
        assert len(rows) == len(out.classes[cid])
        assert rows <= _row_keys(pool64.classes[cid])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_induced_size_multiset_equals_profile(pool64, seed):
    spec = linear(30, 570, 64)
    out = induce_imbalance(pool64, spec, seed)
    assert sorted(out.sizes.tolist()) == sorted(profile(spec).tolist())


def test_induction_seed_behaviour(pool64):
    spec = linear(30, 570, 64)
    a, b, c = (induce_imbalance(pool64, spec, s) for s in (4, 4, 5))
    assert a == b
    assert a.sizes.tolist() != c.sizes.tolist()
    assert sorted(a.sizes.tolist()) == sorted(c.sizes.tolist())


def test_induction_errors(pool64):
    with pytest.raises(InputError, match="64"):
        induce_imbalance(pool64, linear(1, 9, 5), 0)
    with pytest.raises(CapacityError, match="c0"):
        induce_imbalance(pool64, linear(30, 601, 64), 0)


def test_group_step_sizes():
    pool = gen_synthetic(SyntheticSpec(9, 50, 2, n_groups=3))
    out = induce_group_step(pool, "g1", 5, 40)
    assert out.sizes.tolist() == [40, 5, 40] * 3
    assert induce_group_step(pool, "g0", 7, 7).sizes.tolist() == [7] * 9


def test_group_step_on_group_with_no_or_all_members():
    pool = gen_synthetic(SyntheticSpec(9, 50, 2, n_groups=3))
    tr = pool.subset(["c000", "c003", "c006"])  # only g0 remains, g1/g2 still known
    assert induce_group_step(tr, "g1", 5, 40).sizes.tolist() == [40, 40, 40]
    assert induce_group_step(tr, "g0", 5, 40).sizes.tolist() == [5, 5, 5]
    with pytest.raises(InputError, match="unknown group"):
        induce_group_step(tr, "animals", 5, 40)


def test_group_step_covering_22_of_64_matches_step_profile():
    pool = gen_synthetic(SyntheticSpec(100, 444, 4, n_groups=3, seed=0))
    tr, _, _ = split_classes(pool, SplitSpec(64, 16, 20, seed=0))
    out = induce_group_step(tr, "g0", 25, 444)
    assert sorted(out.sizes.tolist()) == profile(step(25, 444, 64, 22)).tolist()


# ---------------------------------------------------------------- manifest


HAND_WRITTEN = """IMBFSL-MANIFEST 1 dim=2 groups=animal,vehicle seed=7
# two classes, two samples each
cat animal 0.5,-1
car vehicle 3,4
cat animal 1e-3,2.25

car vehicle -0.0,7
"""


def test_hand_written_manifest_loads_as_expected():
    pool, meta = parse_manifest(HAND_WRITTEN)
    assert meta == {"seed": "7"}
    assert pool.class_ids == ["cat", "car"]
    assert pool.groups == {"cat": "animal", "car": "vehicle"}
    assert np.array_equal(pool.classes["cat"], [[0.5, -1.0], [0.001, 2.25]])
    assert np.array_equal(pool.classes["car"], [[3.0, 4.0], [-0.0, 7.0]])


def test_manifest_round_trip_is_bit_identical(tmp_path):
    pool = gen_synthetic(SyntheticSpec(5, 7, 3, n_groups=2, seed=11))
    pool = ClassPool({**pool.classes, "edge": np.array([[5e-324, -0.0, 1.7976931348623157e308]])},
                     {**pool.groups, "edge": "g9"}, 3, pool.known_groups)
    path = tmp_path / "p.manifest"
    save_manifest(pool, path, {"config_hash": "abc123", "seed": 11})
    back, meta = read_manifest(path)
    assert back == pool and meta == {"config_hash": "abc123", "seed": "11"}
    for c in pool.class_ids:
        assert np.array_equal(back.classes[c].view(np.int64), pool.classes[c].view(np.int64))
    assert dump_manifest(back, meta) == path.read_text()
    assert load_manifest(path) == pool


def test_manifest_keeps_groups_without_members():
    pool = gen_synthetic(SyntheticSpec(6, 2, 2, n_groups=3)).subset(["c000", "c003"])
    back, _ = parse_manifest(dump_manifest(pool))
    assert back.known_groups == ("g0", "g1", "g2")


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("IMBFSL-MANIFEST 2 dim=2\n", 1),
    ("IMBFSL-MANIFEST 1\na g 1,2\n", 1),
    ("IMBFSL-MANIFEST 1 dim=x\n", 1),
    ("IMBFSL-MANIFEST 1 dim=2 junk\n", 1),
    ("IMBFSL-MANIFEST 1 dim=2\na g 1,2\na g 1\n", 3),
    ("IMBFSL-MANIFEST 1 dim=2\na g 1,2\nb g 1,zz\n", 3),
    ("IMBFSL-MANIFEST 1 dim=2\na g 1,2\na h 1,2\n", 3),
    ("IMBFSL-MANIFEST 1 dim=2\na 1,2\n", 2),
    ("IMBFSL-MANIFEST 1 dim=2\n# nothing\n", None),
])
def test_manifest_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as info:
        parse_manifest(text, path="m.txt")
    assert info.value.line == line
    assert str(info.value).startswith("m.txt:")
