"""Foundation-model benchmarks; skipped unless weights and data are supplied.

FEATPIPE_DINOV2_ONNX  DINOv2-S/14 exported to ONNX (tokens output first, optional
                      final-block attention second; dynamic spatial axes)
FEATPIPE_TCELL_DIR    train/<id>.png + train/<id>.labels.png (sparse, 0 = unlabelled)
                      eval/<id>.png + eval/<id>.mask.png (dense classes)
FEATPIPE_DUTS_DIR     flat dataset: <id>.jpg|png + <id>.mask.png
"""

import os
from pathlib import Path

import numpy as np
import pytest

import featpipe as fp

WEIGHTS = os.environ.get("FEATPIPE_DINOV2_ONNX")
TCELL = os.environ.get("FEATPIPE_TCELL_DIR")
DUTS = os.environ.get("FEATPIPE_DUTS_DIR")

pytestmark = pytest.mark.skipif(not WEIGHTS, reason="set FEATPIPE_DINOV2_ONNX to run foundation-model benchmarks")


@pytest.fixture(scope="module")
def backend():
    pytest.importorskip("onnxruntime")
    from featpipe.onnx import onnx_backend

    prefix = int(os.environ.get("FEATPIPE_DINOV2_PREFIX_TOKENS", "1"))
    return onnx_backend(WEIGHTS, patch_size=14, prefix_tokens=prefix)


def shift_set(backend):
    s = backend.descriptor["stride"]
    return fp.TransformSet.standard(s, "moore", list(range(1, s // 2 + 1)))


def pairs(directory, suffix):
    for img in sorted(p for p in Path(directory).iterdir() if p.suffix in (".png", ".jpg") and "." not in p.stem):
        yield fp.read_image(img), fp.read_labels(img.with_name(img.stem + suffix))


@pytest.mark.skipif(not TCELL, reason="set FEATPIPE_TCELL_DIR")
@pytest.mark.parametrize("features,target", [("deep", 0.797), ("hybrid", 0.809)])
def test_tcell_miou(backend, features, target):
    train = list(pairs(Path(TCELL) / "train", ".labels"))
    ts = shift_set(backend)
    clf = fp.train_classifier([i for i, _ in train], [l for _, l in train], features=features, backend=backend,
                              transform_set=ts, classifier="logistic")
    scores = []
    for image, truth in pairs(Path(TCELL) / "eval", ".mask"):
        pred, _ = fp.predict(clf, image, backend)
        scores.append(fp.miou(pred, truth, [int(c) for c in np.unique(truth) if c > 0]))
    assert abs(float(np.mean(scores)) - target) <= 0.03


@pytest.mark.skipif(not DUTS, reason="set FEATPIPE_DUTS_DIR")
def test_duts_saliency_iou(backend):
    report = fp.benchmark(DUTS, backend, shift_set(backend))
    assert abs(report["saliency_iou"] - 0.654) <= 0.03
