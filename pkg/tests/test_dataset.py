import json

import numpy as np
import pytest

from normalscreen import dataset, imaging, metrics
from normalscreen.autodiff import EVAL, TRAIN, RngState
from normalscreen.dataset import (ABNORMAL, NORMAL, FoldSplit, ImagePipeline, ManifestError, Sample,
                                  grouped_kfold, load_manifest, make_batches)


def write(tmp_path, text):
    p = tmp_path / "m.csv"
    p.write_text(text)
    return p


def test_manifest_happy_path(tmp_path):
    p = write(tmp_path, "image_path,patient_id,label\na.png,p1,normal\nb.png,p1,abnormal\n"
                        "c.png,p2,1\n")
    samples = load_manifest(p)
    assert len(samples) == 3
    assert [s.label for s in samples] == [NORMAL, ABNORMAL, NORMAL]
    assert samples[0].image_path == str(tmp_path / "a.png")


@pytest.mark.parametrize("text,match", [
    ("image_path,patient_id,label\na.png,p1,normal\nb.png,p2,maybe\n", ":3: unknown label 'maybe'"),
    ("image_path,label\na.png,normal\n", "missing column"),
    ("image_path,patient_id,label\na.png,p1,normal\na.png,p2,normal\n", "duplicate"),
    ("image_path,patient_id,label\na.png,,normal\n", "empty patient_id"),
])
def test_manifest_errors(tmp_path, text, match):
    with pytest.raises(ManifestError, match=match):
        load_manifest(write(tmp_path, text))


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample("a.png", "p", 2)
    with pytest.raises(ValueError):
        Sample("a.png", "", 1)


def samples_for(n_patients, per=2):
    return [Sample(f"{p}_{i}.png", f"p{p:02d}", p % 2) for p in range(n_patients) for i in range(per)]


def test_kfold_divisible_case():
    folds = grouped_kfold(samples_for(10), 5, RngState(0))
    assert [len(f.test_ids) for f in folds] == [2] * 5


def test_kfold_partitions_patients():
    samples = samples_for(23, per=3)
    folds = grouped_kfold(samples, 5, RngState(1))
    everyone = {s.patient_id for s in samples}
    seen = []
    for f in folds:
        assert not f.train_ids & f.test_ids
        assert f.train_ids | f.test_ids == everyone
        seen.extend(f.test_ids)
    assert sorted(seen) == sorted(everyone)
    assert sum(len(f.test_samples(samples)) for f in folds) == len(samples)


def test_kfold_deterministic_and_too_few_patients():
    a = grouped_kfold(samples_for(12), 5, RngState(3))
    b = grouped_kfold(samples_for(12), 5, RngState(3))
    assert a == b
    with pytest.raises(ValueError, match="at least k=5"):
        grouped_kfold(samples_for(3), 5, RngState(0))


def test_stratified_folds_mix_classes():
    samples = samples_for(20)
    for f in grouped_kfold(samples, 5, RngState(4), stratify=True):
        labels = [dataset.patient_labels(samples)[p] for p in f.test_ids]
        assert sum(labels) == 2 and len(labels) == 4


def test_reference_fold_sizes_sum_to_dataset():
    rows = [(121, 0, 381, 135), (122, 0, 390, 146), (138, 0, 378, 117), (119, 0, 387, 141),
            (146, 0, 381, 115)]
    assert 121 + 0 + 381 + 135 == 637
    assert sum(sum(r) for r in rows) == 3217


def test_fold_json_round_trip(tmp_path):
    folds = grouped_kfold(samples_for(11), 5, RngState(5))
    path = dataset.save_folds(tmp_path / "f.json", folds)
    doc = json.loads(path.read_text())
    assert doc["k"] == 5 and doc["folds"][0]["fold"] == 0
    assert dataset.load_folds(path) == folds


def test_fold_split_rejects_overlap():
    with pytest.raises(ValueError):
        FoldSplit(0, frozenset({"a"}), frozenset({"a"}))


def test_batches_counts_and_order(small_synth):
    samples = load_manifest(small_synth)[:10]
    pipe = ImagePipeline(size=(16, 16))
    sizes = [len(b.samples) for b in make_batches(samples, 4, pipe, TRAIN, seed=1, epoch=0)]
    assert sizes == [4, 4, 2]
    one = [b.samples for b in make_batches(samples, 4, pipe, TRAIN, seed=1, epoch=0)]
    two = [b.samples for b in make_batches(samples, 4, pipe, TRAIN, seed=1, epoch=0)]
    assert one == two
    covered = sorted(s.image_path for batch in one for s in batch)
    assert covered == sorted(s.image_path for s in samples)
    e0 = [b.images.data for b in make_batches(samples, 4, pipe, EVAL, epoch=0)]
    e1 = [b.images.data for b in make_batches(samples, 4, pipe, EVAL, epoch=1)]
    for a, b in zip(e0, e1):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        next(make_batches([], 4, pipe))


def test_synth_is_deterministic(tmp_path):
    a = dataset.synth_dataset(tmp_path / "a", 6, size=32, seed=9)
    b = dataset.synth_dataset(tmp_path / "b", 6, size=32, seed=9)
    assert a.read_text() == b.read_text()
    for s in load_manifest(a):
        other = tmp_path / "b" / "images" / s.image_path.split("/")[-1]
        assert open(s.image_path, "rb").read() == other.read_bytes()


def test_synth_balanced_and_learnable(tmp_path):
    path = dataset.synth_dataset(tmp_path, 50, size=64, seed=2)
    samples = load_manifest(path)
    labels = dataset.patient_labels(samples)
    assert len(labels) == 50
    assert abs(sum(labels.values()) - 25) <= 1
    sums = np.array([imaging.read_image(s.image_path).astype(float).sum() for s in samples])
    # abnormal films are brighter: score Normal by the negated, rescaled pixel sum
    score = (sums.max() - sums) / (sums.max() - sums.min())
    scored = [metrics.ScoredSample(float(v), s.label) for v, s in zip(score, samples)]
    assert metrics.roc_auc(scored) > 0.8


def test_synth_pgm(tmp_path):
    path = dataset.synth_dataset(tmp_path, 5, size=16, seed=0, image_format="pgm")
    s = load_manifest(path)[0]
    assert s.image_path.endswith(".pgm")
    assert imaging.read_image(s.image_path).shape == (16, 16)
    with pytest.raises(ValueError):
        dataset.synth_dataset(tmp_path, 3)
