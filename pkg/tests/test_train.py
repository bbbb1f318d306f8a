import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgmsnet.data import apply_transform, augment, split_samples, synth_dataset
from lgmsnet.model import ModelConfig, init_params
from lgmsnet.tensor import Rng, Tensor
from lgmsnet.train import (
    Hyper,
    MetricReport,
    NonFiniteLoss,
    bce_with_logits,
    binarize,
    cosine_lr,
    dice_loss,
    evaluate,
    metrics,
    seg_loss,
    sgd_step,
    train_loop,
    train_step,
)

TINY = ModelConfig(stage_channels=(4, 4, 8, 8, 8), input_channels=1)


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# -- losses


def test_saturated_perfect_prediction():
    y = (np.random.default_rng(0).random((2, 1, 8, 8)) < 0.4).astype(float)
    assert seg_loss(t(np.where(y == 1, 40.0, -40.0)), t(y)).item() < 1e-6


def test_half_probability_two_pixels():
    y = t([[1.0, 0.0]])
    z = t([[0.0, 0.0]])
    assert abs(bce_with_logits(z, y).item() - math.log(2)) < 1e-12
    dice = 1 - (2 * 0.5 + 1) / (1.0 + 1 + 1)
    assert abs(seg_loss(z, y).item() - (0.5 * math.log(2) + dice)) < 1e-12


def test_bce_stable_for_huge_logits():
    v = bce_with_logits(t([[1000.0, -1000.0]]), t([[0.0, 1.0]])).item()
    assert v == pytest.approx(1000.0)


def test_loss_errors():
    with pytest.raises(ValueError):
        seg_loss(t([[0.0, 1.0]]), t([[1.0]]))
    with pytest.raises(ValueError):
        seg_loss(t([[0.0, 1.0]]), t([[0.5, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_ranges(seed):
    g = np.random.default_rng(seed)
    z = g.normal(scale=5, size=(1, 1, 4, 4))
    y = (g.random(z.shape) < 0.5).astype(float)
    assert seg_loss(t(z), t(y)).item() >= 0
    d = dice_loss(t(g.random(z.shape)), t(y)).item()
    assert 0 <= d <= 1


# -- metrics


def test_metrics_perfect():
    m = np.zeros((1, 1, 4, 4))
    m[0, 0, :2] = 1
    r = metrics(m, m)
    assert r.iou == 1 and r.f1 == 1


def test_metrics_partial_overlap():
    p = np.zeros((1, 1, 4, 4))
    g = np.zeros((1, 1, 4, 4))
    p[0, 0, 0, :4] = 1
    g[0, 0, 0, 2:] = 1
    g[0, 0, 1, :2] = 1
    r = metrics(p, g)
    assert r.iou == pytest.approx(2 / 6) and r.f1 == 0.5


def test_metrics_empty_convention():
    z = np.zeros((1, 1, 3, 3))
    r = metrics(z, z)
    assert r.iou == 1 and r.f1 == 1


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        metrics(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_f1_iou_identity_on_random_masks():
    g = np.random.default_rng(0)
    for _ in range(1000):
        shape = (1, 1, *g.integers(1, 9, size=2))
        p = g.random(shape) < g.random()
        y = g.random(shape) < g.random()
        r = metrics(p, y)
        inter, union = int((p & y).sum()), int((p | y).sum())
        if union:
            iou = Fraction(inter, union)
            assert Fraction(2 * inter, int(p.sum()) + int(y.sum())) == 2 * iou / (1 + iou)
        assert abs(r.f1 - 2 * r.iou / (1 + r.iou)) <= 1e-15


def test_merge_pools_counts():
    a = MetricReport.from_counts(1, 2, 2, loss=1.0, count=1)
    b = MetricReport.from_counts(3, 4, 3, loss=3.0, count=3)
    m = a.merge(b)
    assert m.iou == pytest.approx(4 / 7) and m.loss == pytest.approx(2.5) and m.count == 4


def test_binarize_threshold():
    np.testing.assert_array_equal(binarize(np.array([-1e-9, 0.0, 2.0])), [0, 1, 1])


# -- data


def test_synth_contract():
    ds = synth_dataset(100, 64, 3)
    assert len(ds) == 100
    for s in ds:
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert 0.02 <= s.fg_ratio <= 0.6
        fg, bg = s.image[:, s.mask[0] == 1].mean(), s.image[:, s.mask[0] == 0].mean()
        assert abs(fg - bg) >= 0.2 - 0.05  # noise shifts the sampled contrast slightly


def test_synth_deterministic():
    a, b = synth_dataset(5, 32, 9), synth_dataset(5, 32, 9)
    assert all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes() for x, y in zip(a, b))


def test_synth_ratio_spread():
    ratios = [s.fg_ratio for s in synth_dataset(500, 32, 1)]
    assert min(ratios) <= 0.05 and max(ratios) >= 0.5


def test_synth_size_check():
    with pytest.raises(ValueError):
        synth_dataset(1, 30, 0)


def test_rotation_180_twice_is_identity():
    s = synth_dataset(1, 32, 0)[0]
    r = apply_transform(apply_transform(s, 2), 2)
    assert np.array_equal(r.image, s.image) and np.array_equal(r.mask, s.mask)


def test_flip_preserves_count():
    s = synth_dataset(1, 32, 0)[0]
    assert apply_transform(s, 0, hflip=True).mask.sum() == s.mask.sum()


def test_rotation_needs_square():
    from lgmsnet.data import SegSample

    s = SegSample(np.zeros((1, 4, 8), np.float32), np.zeros((1, 4, 8), np.float32), "r")
    with pytest.raises(ValueError):
        apply_transform(s, 1)
    assert apply_transform(s, 2).image.shape == (1, 4, 8)


@pytest.mark.parametrize("seed", range(5))
def test_augment_preserves_multisets_and_is_deterministic(seed):
    s = synth_dataset(1, 32, seed)[0]
    a = augment(s, Rng(seed).stream("augment", 0))
    b = augment(s, Rng(seed).stream("augment", 0))
    assert a.image.tobytes() == b.image.tobytes()
    assert np.array_equal(np.sort(a.image, None), np.sort(s.image, None))
    assert np.array_equal(np.sort(a.mask, None), np.sort(s.mask, None))


def test_split_disjoint():
    ds = synth_dataset(20, 16, 0)
    tr, va = split_samples(ds, 0.2, 1)
    assert len(va) == 4 and len(tr) == 16 and not {s.id for s in tr} & {s.id for s in va}


# -- optimization


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 0.02) == 0.02
    assert cosine_lr(99, 100, 0.02) < 1e-4 * 0.02
    assert cosine_lr(50, 101, 1.0) == pytest.approx(0.5)


def test_zero_lr_leaves_params_bit_identical():
    store = init_params(TINY, 0)
    before = {n: v.data.tobytes() for n, v in store.trainable()}
    slots = {n: np.zeros_like(v.data) for n, v in store.trainable()}
    grads = {n: np.ones_like(v.data) for n, v in store.trainable()}
    sgd_step(store, grads, slots, 0.0, 0.9, 1e-4)
    assert all(before[n] == v.data.tobytes() for n, v in store.trainable())


def test_one_small_step_decreases_loss():
    cfg = ModelConfig(stage_channels=(8, 16, 32, 64, 64), input_channels=1)
    s = synth_dataset(1, 64, 4)[0]
    store = init_params(cfg, 0, np.float64)
    img, mask = s.image[None].astype(np.float64), s.mask[None].astype(np.float64)
    before, _, grads = train_step(cfg, store, img, mask)
    slots = {n: np.zeros_like(v.data) for n, v in store.trainable()}
    sgd_step(store, grads, slots, 1e-3, 0.9, 0.0)
    after, _, _ = train_step(cfg, store, img, mask)
    assert after < before


def test_training_is_reproducible_and_keeps_best():
    ds = synth_dataset(20, 32, 2)
    tr, va = split_samples(ds, 0.2, 2)
    hyper = Hyper(epochs=2, batch=4, seed=3)
    s1, t1 = train_loop(TINY, tr, va, hyper)
    s2, t2 = train_loop(TINY, tr, va, hyper)
    assert [r.csv() for r in t1] == [r.csv() for r in t2]
    assert [r.split for r in t1] == ["train", "val", "train", "val"]
    assert s1.step == 8 and s1.best_iou == max(r.iou for r in t1 if r.split == "val")
    assert evaluate(TINY, s1.best, va).iou == pytest.approx(s1.best_iou)


def test_max_steps_caps_training():
    ds = synth_dataset(16, 32, 0)
    state, _ = train_loop(TINY, ds[:12], ds[12:], Hyper(epochs=5, batch=4, max_steps=4))
    assert state.step == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_names_step():
    ds = synth_dataset(8, 32, 0)
    with pytest.raises(NonFiniteLoss) as err:
        train_loop(TINY, ds[:4], ds[4:], Hyper(lr=1e30, epochs=3, batch=2, augment=False))
    assert err.value.step >= 1


def test_train_rejects_overlapping_splits():
    ds = synth_dataset(8, 32, 0)
    with pytest.raises(ValueError):
        train_loop(TINY, ds, ds[:2], Hyper(epochs=1, batch=2))
