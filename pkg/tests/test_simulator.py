import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salad.data import CompositionMap
from salad.simulator import (
    check_invariants,
    connected_components,
    perlin_mask,
    sample_training_example,
    simulate_inpaint,
    simulate_removal,
    simulate_structural,
)

from .helpers import random_composition_map


def _blocks():
    c = np.zeros((64, 64), np.int64)
    c[8:24, 8:24] = 1
    c[40:56, 40:56] = 2
    c[8:12, 50:54] = 3  # 16 px, below min_area
    return CompositionMap(c, 4)


def test_components_respect_min_area():
    comps = connected_components(_blocks(), min_area=50)
    assert sorted((x.class_id, x.area) for x in comps) == [(1, 256), (2, 256)]


def test_perlin_mask_deterministic():
    assert np.array_equal(perlin_mask(64, 64, 5), perlin_mask(64, 64, 5))
    assert perlin_mask(64, 64, 5).dtype == bool


def test_removal_fills_with_background():
    s = simulate_removal(_blocks(), 0)
    assert s.kind == "component_removal" and not check_invariants(_blocks(), s)
    erased = s.augmented.classes != _blocks().classes
    assert erased.sum() == 256 and np.all(s.augmented.classes[erased] == 0)


def test_inpaint_gt_covers_every_pixel_of_class():
    src = np.zeros((64, 64), np.int64)
    src[30:40, 0:20] = 1
    s = simulate_inpaint(_blocks(), CompositionMap(src, 4), 0)
    assert s.kind == "component_inpaint"
    assert s.gt_mask.sum() == 256 + 200 and not check_invariants(_blocks(), s)


def test_no_components_falls_back_to_clean():
    empty = CompositionMap(np.zeros((32, 32), np.int64), 3)
    assert simulate_removal(empty, 0).kind == "none"
    assert simulate_inpaint(empty, empty, 0).kind == "none"


def test_inpaint_shape_mismatch():
    with pytest.raises(ValueError):
        simulate_inpaint(_blocks(), CompositionMap(np.zeros((8, 8), np.int64), 4), 0)


def test_sample_is_seed_deterministic():
    corpus = [random_composition_map(np.random.default_rng(i), 64) for i in range(3)]
    a = sample_training_example(corpus[0], corpus, 123, exclude=0)
    b = sample_training_example(corpus[0], corpus, 123, exclude=0)
    assert a.kind == b.kind and a.augmented == b.augmented and np.array_equal(a.gt_mask, b.gt_mask)


def test_p_anomaly_extremes():
    corpus = [_blocks(), _blocks()]
    assert sample_training_example(corpus[0], corpus, 1, p_anomaly=0.0).kind == "none"
    assert sample_training_example(corpus[0], corpus, 1, p_anomaly=1.0,
                                   strategies=("perlin_paste",)).kind == "perlin_paste"


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(["structural", "removal", "inpaint"]))
def test_invariants_hold(seed, kind):
    rng = np.random.default_rng(seed)
    c, other = random_composition_map(rng, 64), random_composition_map(rng, 64)
    s = {"structural": lambda: simulate_structural(c, seed),
         "removal": lambda: simulate_removal(c, seed),
         "inpaint": lambda: simulate_inpaint(c, other, seed)}[kind]()
    assert check_invariants(c, s) == []
    if s.kind == "perlin_paste":
        assert np.array_equal(s.gt_mask, s.augmented.classes != c.classes)


def test_check_invariants_flags_bad_gt():
    from salad.simulator import SyntheticSample

    c = _blocks()
    bad = SyntheticSample(c, np.ones(c.shape, bool), "none")
    assert check_invariants(c, bad)
