import numpy as np
import pytest

from sherl.backbones import BackboneSpec, build
from sherl.errors import ConfigError
from sherl.harness import Strategy, TrainConfig, accuracy, train
from sherl.tasks import Shift, TaskSpec, generate_task


def _equal(a, b):
    if isinstance(a.x, tuple):
        return all(np.array_equal(p, q) for p, q in zip(a.x, b.x)) and np.array_equal(a.y, b.y)
    return np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


@pytest.mark.parametrize("kind", ["tokens", "images", "seq2seq"])
def test_same_seed_same_data(kind):
    spec = TaskSpec(kind=kind, shift=Shift(0.5, True, 0.1), seed=9)
    (s1, t1), (s2, t2) = generate_task(spec), generate_task(spec)
    for a, b in [(s1.train, s2.train), (t1.test, t2.test)]:
        assert _equal(a, b)


@pytest.mark.parametrize("kind", ["tokens", "images", "seq2seq"])
def test_identity_shift_reproduces_source_distribution(kind):
    spec = TaskSpec(kind=kind, seed=2)
    assert spec.shift.is_identity
    source, target = generate_task(spec)
    # same generative model: class-conditional means agree up to sampling noise
    xs = source.train.x[0] if kind == "seq2seq" else source.train.x
    xt = target.train.x[0] if kind == "seq2seq" else target.train.x
    assert np.abs(xs.mean() - xt.mean()) < 0.1
    assert np.abs(xs.std() - xt.std()) < 0.1
    assert set(np.unique(source.train.y)) == set(np.unique(target.train.y))


def test_splits_are_distinct_draws():
    source, target = generate_task(TaskSpec(seed=1))
    assert not np.array_equal(source.train.x[:4], source.test.x[:4])
    assert not np.array_equal(source.train.x[:4], target.train.x[:4])


def test_shapes():
    source, _ = generate_task(TaskSpec(kind="seq2seq", n_train=5))
    src, tgt = source.train.x
    assert src.shape == (5, 8, 12) and tgt.shape == (5, 6, 12) and source.train.y.shape == (5, 6)
    images, _ = generate_task(TaskSpec(kind="images", n_train=5))
    assert images.train.x.shape == (5, 3, 16, 16)


def test_redundancy_stress_repeats_block():
    source, _ = generate_task(TaskSpec(redundancy_stress=True, copies=3, informative=3))
    x = source.train.x
    np.testing.assert_array_equal(x[..., 0:3], x[..., 3:6])
    np.testing.assert_array_equal(x[..., 0:3], x[..., 6:9])


def test_label_remap_permutes_classes():
    spec = TaskSpec(shift=Shift(remap_labels=True), noise=0.0, seed=4)
    source, target = generate_task(spec)
    # with zero noise and no rotation each class has one fixed informative block
    src = {int(c): source.train.x[source.train.y == c][0, :, :3] for c in range(4)}
    tgt = {int(c): target.train.x[target.train.y == c][0, :, :3] for c in range(4)}
    mapping = {c: next(k for k in tgt if np.allclose(tgt[k], src[c])) for c in src}
    assert sorted(mapping.values()) == [0, 1, 2, 3]
    assert any(mapping[c] != c for c in mapping)


@pytest.mark.parametrize("kwargs", [
    dict(n_classes=1),
    dict(kind="audio"),
    dict(n_test=0),
    dict(redundancy_stress=True, copies=5, informative=3),
    dict(kind="seq2seq", in_features=4, informative=2, tgt_len=6),
])
def test_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        TaskSpec(**kwargs)


def test_large_shift_drops_source_model_to_chance():
    accs = []
    for seed in range(3):
        spec = TaskSpec(redundancy_stress=True, shift=Shift(np.pi / 2, True, 0.0), seed=seed)
        source, target = generate_task(spec)
        fitted = train(Strategy("FullFT"), build(BackboneSpec(seed=seed)), source,
                       TrainConfig(epochs=5, seed=seed), spec.n_classes).model
        assert accuracy(fitted, source.test) > 0.85
        accs.append(accuracy(fitted, target.test))
    assert abs(np.mean(accs) - 0.25) < 0.1
