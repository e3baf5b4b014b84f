import math

import numpy as np
import pytest
import torch

from srma import (
    DomainSpec,
    LabelOutOfRangeError,
    MissingPairError,
    confusion_matrix,
    default_domain_pair,
    generate_domain,
    load_dataset,
    make_pretrain_domains,
    miou,
    save_dataset,
)
from srma.data import ShapeMismatchError


def _spec(**kw):
    base = dict(
        num_categories=3,
        gains=[(0.9, 0.2, 0.2), (0.2, 0.9, 0.2), (0.2, 0.2, 0.9)],
        brightness=[0.05, 0.05, 0.05],
        noise=[0.02, 0.02, 0.02],
        layout_seed=0,
        size=32,
    )
    base.update(kw)
    return DomainSpec(**base)


def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(size=8)
    with pytest.raises(ValueError):
        _spec(gains=[(0.9, 0.2, 0.2), (0.0, 0.9, 0.2), (0.2, 0.2, 0.9)])


def test_generate_shapes_and_ranges():
    samples = generate_domain(_spec(), 3, np.random.default_rng(0))
    assert len(samples) == 3
    for s in samples:
        assert s.image.shape == (3, 32, 32)
        assert s.image.dtype == torch.float32
        assert s.labels.shape == (32, 32)
        assert s.labels.dtype == torch.int64
        assert 0.0 <= s.image.min().item() and s.image.max().item() <= 1.0
        assert set(s.labels.unique().tolist()) <= {0, 1, 2}


def test_all_categories_present():
    for seed in range(5):
        samples = generate_domain(_spec(layout_seed=seed), 2, np.random.default_rng(0))
        for s in samples:
            assert set(s.labels.unique().tolist()) == {0, 1, 2}


def test_same_layout_seed_gives_identical_labels():
    a = generate_domain(_spec(), 2, np.random.default_rng(0))
    b = generate_domain(_spec(brightness=[0.4, 0.4, 0.4]), 2, np.random.default_rng(99))
    for sa, sb in zip(a, b):
        assert torch.equal(sa.labels, sb.labels)


def test_gain_isolation():
    """Changing one category's gain leaves the other categories' pixels untouched."""
    a = _spec(noise=[0.0, 0.0, 0.0])
    b = _spec(noise=[0.0, 0.0, 0.0], gains=[(0.9, 0.2, 0.2), (0.2, 0.9, 0.2), (0.7, 0.7, 0.1)])
    sa = generate_domain(a, 1, np.random.default_rng(0))[0]
    sb = generate_domain(b, 1, np.random.default_rng(0))[0]
    same = (sa.labels != 2).unsqueeze(0).expand(3, -1, -1)
    assert torch.equal(sa.image[same], sb.image[same])
    changed = (sa.labels == 2).unsqueeze(0).expand(3, -1, -1)
    assert not torch.equal(sa.image[changed], sb.image[changed])


def test_default_pair_shares_layout_and_shifts_style():
    src_spec, tgt_spec = default_domain_pair(num_categories=4, layout_seed=3)
    src = generate_domain(src_spec, 2, np.random.default_rng(0))
    tgt = generate_domain(tgt_spec, 2, np.random.default_rng(0))
    for s, t in zip(src, tgt):
        assert torch.equal(s.labels, t.labels)
        assert (s.image - t.image).abs().mean().item() > 0.05
    # target collapses category colors: per-category image means nearly coincide
    t = tgt[0]
    means = [t.image.permute(1, 2, 0)[t.labels == c].mean().item() for c in range(4)]
    assert max(means) - min(means) < 0.15
    s = src[0]
    means = [s.image.permute(1, 2, 0)[s.labels == c].mean().item() for c in range(4)]
    assert max(means) - min(means) > 0.05


def test_pretrain_corpus_size_and_determinism():
    a = make_pretrain_domains(num_categories=3, seed=1, n_domains=4, per_domain=2, size=32)
    b = make_pretrain_domains(num_categories=3, seed=1, n_domains=4, per_domain=2, size=32)
    assert len(a) == 8
    for sa, sb in zip(a, b):
        assert torch.equal(sa.image, sb.image)
        assert torch.equal(sa.labels, sb.labels)
    c = make_pretrain_domains(num_categories=3, seed=2, n_domains=4, per_domain=2, size=32)
    assert not torch.equal(a[0].image, c[0].image)


def test_save_load_roundtrip(tmp_path):
    spec = _spec()
    samples = generate_domain(spec, 3, np.random.default_rng(0))
    save_dataset(samples, tmp_path / "d", spec)
    loaded = load_dataset(tmp_path / "d")
    assert len(loaded) == 3
    for s, l in zip(samples, loaded):
        assert torch.equal(s.labels, l.labels)
        # images pass through 8-bit quantization
        assert (s.image - l.image).abs().max().item() <= 0.5 / 255.0 + 1e-6
        assert l.image.dtype == torch.float32


def test_load_missing_label_raises(tmp_path):
    spec = _spec()
    samples = generate_domain(spec, 2, np.random.default_rng(0))
    save_dataset(samples, tmp_path / "d", spec)
    (tmp_path / "d" / "labels" / "00001.png").unlink()
    with pytest.raises(MissingPairError):
        load_dataset(tmp_path / "d")


def test_load_out_of_range_label_raises(tmp_path):
    spec = _spec()
    samples = generate_domain(spec, 1, np.random.default_rng(0))
    samples[0].labels[0, 0] = 9
    save_dataset(samples, tmp_path / "d", spec)
    with pytest.raises(LabelOutOfRangeError):
        load_dataset(tmp_path / "d")


def test_load_ignore_label_allowed(tmp_path):
    spec = _spec()
    samples = generate_domain(spec, 1, np.random.default_rng(0))
    samples[0].labels[0, 0] = 255
    save_dataset(samples, tmp_path / "d", spec)
    loaded = load_dataset(tmp_path / "d")
    assert loaded[0].labels[0, 0].item() == 255


def test_load_missing_directory_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")


def test_confusion_matrix_hand_example():
    pred = [torch.tensor([[0, 1], [1, 1]])]
    truth = [torch.tensor([[0, 0], [1, 1]])]
    cm = confusion_matrix(pred, truth, 2)
    assert cm.tolist() == [[1, 1], [0, 2]]


def test_confusion_matrix_skips_ignore():
    pred = [torch.tensor([[0, 1]])]
    truth = [torch.tensor([[255, 1]])]
    cm = confusion_matrix(pred, truth, 2)
    assert cm.sum() == 1 and cm[1, 1] == 1


def test_confusion_matrix_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        confusion_matrix([torch.zeros(2, 2, dtype=torch.long)], [torch.zeros(3, 3, dtype=torch.long)], 2)


def test_miou_hand_example():
    # category 0: tp=1, fp=0, fn=1 -> 1/2; category 1: tp=2, fp=1, fn=0 -> 2/3
    pred = [torch.tensor([[0, 1], [1, 1]])]
    truth = [torch.tensor([[0, 0], [1, 1]])]
    ious, mean = miou(pred, truth, 2)
    assert ious[0] == pytest.approx(0.5, abs=1e-9)
    assert ious[1] == pytest.approx(2.0 / 3.0, abs=1e-9)
    assert mean == pytest.approx(7.0 / 12.0, abs=1e-6)


def test_miou_absent_category_excluded():
    pred = [torch.tensor([[0, 0]])]
    truth = [torch.tensor([[0, 0]])]
    ious, mean = miou(pred, truth, 3)
    assert ious[0] == pytest.approx(1.0)
    assert math.isnan(ious[1]) and math.isnan(ious[2])
    assert mean == pytest.approx(1.0)


def test_miou_predicted_only_category_counts_as_zero():
    pred = [torch.tensor([[1, 0]])]
    truth = [torch.tensor([[0, 0]])]
    ious, _ = miou(pred, truth, 3)
    assert ious[1] == pytest.approx(0.0)
    assert math.isnan(ious[2])


def test_miou_accumulates_over_samples():
    pred = [torch.tensor([[0]]), torch.tensor([[1]])]
    truth = [torch.tensor([[0]]), torch.tensor([[0]])]
    ious, _ = miou(pred, truth, 2)
    # category 0: tp=1, fn=1 -> 1/2 after accumulation
    assert ious[0] == pytest.approx(0.5)
