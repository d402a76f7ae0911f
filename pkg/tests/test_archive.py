import json
import struct
from dataclasses import replace

import numpy as np
import pytest

from normalscreen import archive
from normalscreen.archive import (ArchiveError, ArchiveVersionError, MissingTensorError,
                                  TensorShapeError, UnexpectedTensorError)
from normalscreen.autodiff import EVAL, RngState
from normalscreen.model import ModelConfig, build_model, forward, stem_forward, with_precomputed_stem
from normalscreen.train import TrainConfig, train_arrays

CFG = ModelConfig(input_size=(16, 16), stem_out_channels=4, stem_channels=(2, 3), num_blocks=1)


def test_byte_layout(tmp_path):
    path = archive.write_archive(tmp_path / "a.nsw", {"w": np.arange(3, dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"NSW1"
    (length,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + length])
    assert header["version"] == 1
    assert header["tensors"] == [{"dtype": "<f4", "name": "w", "nbytes": 12, "offset": 0,
                                  "shape": [3]}]
    assert raw[12 + length:] == np.arange(3, dtype="<f4").tobytes()


def test_save_load_save_is_byte_identical(tmp_path):
    model = build_model(CFG, RngState(0))
    a = archive.save_weights(model, tmp_path / "a.nsw")
    other = build_model(CFG, RngState(1))
    archive.load_weights(other, a)
    b = archive.save_weights(other, tmp_path / "b.nsw")
    assert a.read_bytes() == b.read_bytes()


def test_forward_after_round_trip(tmp_path):
    model = build_model(CFG, RngState(0))
    model.params["head.weight"].data[:] = 1.0
    x = np.random.default_rng(0).random((2, 1, 16, 16))
    before = forward(model, x, EVAL).data
    archive.save_weights(model, tmp_path / "w.nsw")
    restored = archive.load_weights(build_model(CFG, RngState(9)), tmp_path / "w.nsw")
    np.testing.assert_array_equal(forward(restored, x, EVAL).data, before)


def test_load_errors_are_distinct(tmp_path):
    model = build_model(CFG, RngState(0))
    path = archive.save_weights(model, tmp_path / "w.nsw")
    wider = build_model(replace(CFG, stem_out_channels=6), RngState(0))
    with pytest.raises(TensorShapeError, match="stem.conv2.kernel"):
        archive.load_weights(wider, path)
    deeper = build_model(replace(CFG, num_blocks=2), RngState(0))
    with pytest.raises(MissingTensorError, match="block1"):
        archive.load_weights(deeper, path)
    state = model.state()
    state["extra"] = np.zeros(1, np.float32)
    archive.write_archive(tmp_path / "x.nsw", state)
    with pytest.raises(UnexpectedTensorError, match="extra"):
        archive.load_weights(model, tmp_path / "x.nsw")

    raw = bytearray(path.read_bytes())
    (length,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + length])
    header["version"] = 99
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    (tmp_path / "v.nsw").write_bytes(b"NSW1" + struct.pack("<Q", len(blob)) + blob
                                     + bytes(raw[12 + length:]))
    with pytest.raises(ArchiveVersionError):
        archive.read_archive(tmp_path / "v.nsw")
    (tmp_path / "bad.nsw").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ArchiveError):
        archive.read_archive(tmp_path / "bad.nsw")


def test_feature_import_round_trip(tmp_path):
    feats = np.random.default_rng(0).standard_normal((3, 4, 2, 2)).astype(np.float32)
    archive.save_features(tmp_path / "f.nsw", feats)
    np.testing.assert_array_equal(archive.import_features(tmp_path / "f.nsw", 4), feats)
    with pytest.raises(TensorShapeError):
        archive.import_features(tmp_path / "f.nsw", 320)


def test_imported_features_train_like_frozen_stem(tmp_path):
    cfg = replace(CFG, dtype="float64")
    rng = np.random.default_rng(1)
    images = rng.random((12, 1, 16, 16))
    labels = (np.arange(12) % 2).astype(float)
    tc = TrainConfig(lr=1e-2, epochs=3, batch_size=4, seed=3, freeze_stem=True)

    stem_model = build_model(cfg, RngState(2))
    feats = stem_forward(stem_model, images).data
    archive.save_features(tmp_path / "f.nsw", feats)
    imported = archive.import_features(tmp_path / "f.nsw", cfg.stem_out_channels)

    feat_model = build_model(with_precomputed_stem(cfg), RngState(0))
    for k in feat_model.params:
        feat_model.params[k].data = stem_model.params[k].data.copy()

    a = train_arrays(stem_model, images, labels, tc)
    b = train_arrays(feat_model, imported, labels, tc)
    np.testing.assert_allclose(a.losses, b.losses, rtol=1e-10)
    for k in feat_model.params:
        np.testing.assert_allclose(stem_model.params[k].data, feat_model.params[k].data,
                                   rtol=1e-9, atol=1e-12)
