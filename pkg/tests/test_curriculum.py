import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ahocda.curriculum import (Curriculum, build_curriculum, fake_source_ids, fake_source_size,
                               materialize_fake_source)
from ahocda.errors import ParameterError, StateError


def test_three_items_three_stages():
    cur = build_curriculum([("a", 3.0), ("b", 1.0), ("c", 2.0)], 3)
    assert cur.ids == ["b", "c", "a"]
    assert cur.stages == (("b",), ("c",), ("a",))


def test_nine_items():
    d = [(f"x{i}", float(9 - i)) for i in range(9)]
    cur = build_curriculum(d, 3)
    assert [len(s) for s in cur.stages] == [3, 3, 3]
    one = build_curriculum(d, 1)
    assert len(one.stages) == 1 and list(one.stages[0]) == one.ids
    assert one.ids == [f"x{i}" for i in range(8, -1, -1)]


def test_ties_broken_by_id():
    cur = build_curriculum([("b", 1.0), ("a", 1.0), ("c", 0.5)], 1)
    assert cur.ids == ["c", "a", "b"]


def test_k_too_large():
    with pytest.raises(ParameterError):
        build_curriculum([("a", 1.0)], 2)
    with pytest.raises(ParameterError):
        build_curriculum([], 1)


def test_non_divisible_drops_farthest(caplog):
    d = [(f"x{i}", float(i)) for i in range(10)]
    cur = build_curriculum(d, 3)
    assert cur.size == 9
    assert [i for i, _ in cur.dropped] == ["x9"]
    assert "dropping" in caplog.text


def test_fake_source_sizes_paper_case():
    cur = build_curriculum([(f"x{i}", float(i)) for i in range(9)], 3)
    assert fake_source_ids(cur, 1) == []
    assert fake_source_ids(cur, 2) == ["x0"]
    assert fake_source_ids(cur, 3) == ["x0", "x1", "x2"]
    with pytest.raises(ParameterError):
        fake_source_ids(cur, 0)
    with pytest.raises(ParameterError):
        fake_source_ids(cur, 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 60).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))),
       st.integers(0, 2 ** 31))
def test_partition_and_pool_invariants(nk, seed):
    n, k = nk
    rng = np.random.default_rng(seed)
    d = [(f"id{i:03d}", float(v)) for i, v in enumerate(rng.random(n))]
    cur = build_curriculum(d, k)
    flat = [i for s in cur.stages for i in s]
    assert flat == cur.ids
    assert len(set(flat)) == len(flat) == n - n % k
    deltas = [v for _, v in cur.ordered]
    assert deltas == sorted(deltas)
    prev = []
    for j in range(1, k + 1):
        pool = fake_source_ids(cur, j)
        assert pool[:len(prev)] == prev
        assert len(pool) == fake_source_size(cur.size, k, j)
        seen = {i for s in cur.stages[:j - 1] for i in s}
        assert set(pool) <= seen
        prev = pool


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10 ** 6), min_size=3, max_size=30, unique=True),
       st.integers(1, 3))
def test_monotone_transform_preserves_curriculum(vals, k):
    d = [(f"i{n}", float(v)) for n, v in enumerate(vals)]
    a = build_curriculum(d, k)
    b = build_curriculum([(i, np.sqrt(v) * 3 + 1) for i, v in d], k)
    assert a.stages == b.stages


def test_json_roundtrip():
    cur = build_curriculum([(f"x{i}", float(i)) for i in range(6)], 3)
    obj = cur.to_json(0.09)
    assert obj["fake_source_per_stage"] == [[], ["x0"], ["x0", "x1"]]
    back = Curriculum.from_json(obj)
    assert back.stages == cur.stages and back.ordered == cur.ordered


class _Const:
    def __init__(self, cls=0, n=3):
        self.cls, self.n = cls, n

    def predict_proba(self, image):
        p = np.zeros(image.shape[:2] + (self.n,))
        p[..., self.cls] = 1.0
        return p


def test_materialize_empty_and_constant():
    imgs = {"a": np.zeros((4, 5, 3)), "b": np.ones((4, 5, 3))}
    assert len(materialize_fake_source([], _Const(), imgs)) == 0
    fs = materialize_fake_source(["a", "b"], _Const(0), imgs, stage=2, provenance="ck1")
    assert fs.ids == ["a", "b"] and fs.stage == 2 and fs.provenance == "ck1"
    for _, lab in fs.members:
        assert lab.shape == (4, 5) and not lab.any()


def test_materialize_requires_model():
    with pytest.raises(StateError):
        materialize_fake_source(["a"], None, {"a": np.zeros((2, 2, 3))})


def test_materialize_matches_independent_forward_pass():
    from ahocda.model import ModelConfig, SegModel
    from ahocda.spectrum import Image
    cfg = ModelConfig(enc_channels=(4, 4, 8), proj_dim=4, memory_size=5)
    model = SegModel(cfg, np.random.default_rng(3))
    img = Image(np.random.default_rng(4).random((6, 7, 3)))
    fs = materialize_fake_source(["x"], model, {"x": img})
    twin = SegModel(cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(fs.members[0][1], np.argmax(twin.forward(img)[0], axis=-1))
