import json
import math
import os
import subprocess

import numpy as np
import pytest

import made


def test_iou_and_giou():
    assert made.iou((0, 10), (5, 15)) == pytest.approx(5 / 15)
    assert made.iou((0, 1), (2, 3)) == 0.0
    assert made.giou((0.5, 1.0), (0.5, 1.0)) == pytest.approx(1.0)
    assert made.giou((0.5, 1.0), (2.5, 1.0)) == pytest.approx(-1 / 3)
    with pytest.raises(made.ContractError):
        made.giou((0.0, 0.0), (1.0, 1.0))


def test_moment_normalization_roundtrip():
    c, w = made.normalize_moment(30, 20, 200)
    assert (c, w) == pytest.approx((0.2, 0.1))
    assert made.denormalize_moment(c, w, 200, 120) == pytest.approx((30, 50))
    assert made.segment_count(140) == 27


def test_metrics():
    rankings = [
        {"query_id": "q1", "ranked": [["a", 0.9, 0.0, 10.0], ["b", 0.1, None, None]]},
        {"query_id": "q2", "ranked": [["a", 0.8, 0.0, 7.0], ["b", 0.2, 0.0, 10.0]]},
    ]
    gts = {"q1": ("a", (0.0, 10.0)), "q2": ("b", (0.0, 10.0))}
    assert made.recall_at_k(rankings, gts, 1) == pytest.approx(50.0)
    assert made.recall_at_k(rankings, gts, 5) == pytest.approx(100.0)
    assert made.moment_recall_at_k(rankings, gts, 1) == pytest.approx(50.0)
    report = made.msg_report(rankings, gts)
    assert report["mode"] == "msg"
    assert report["mIoU"] == pytest.approx(1.0)
    smg = made.smg_report({"q1": (0.0, 7.0), "q2": (0.0, 10.0)}, gts)
    assert smg["mIoU"] == pytest.approx(0.85)


def test_feature_roundtrip(tmp_path):
    tokens = np.random.default_rng(0).standard_normal((3, 512)).astype(np.float32)
    path = str(tmp_path / "v.mgsv")
    made.write_features(path, tokens, 12.5)
    back, duration = made.read_features(path)
    assert duration == pytest.approx(12.5)
    np.testing.assert_array_equal(back, tokens)
    assert os.path.getsize(path) == 20 + 3 * 512 * 4
    with pytest.raises(made.DataError):
        made.write_features(path, np.zeros((2, 100), np.float32), 1.0)
    with pytest.raises(made.DimensionError):
        made.write_features(path, np.zeros(512, np.float32), 1.0)
    with pytest.raises(made.DataError):
        made.read_features(str(tmp_path / "missing.mgsv"))


def test_synth_and_manifest(tmp_path):
    root = str(tmp_path / "data")
    made.gen_synth(root, {"n_tracks": 3, "videos_per_track": 2})
    m = made.read_manifest(os.path.join(root, "train.jsonl"))
    assert m["split"] == "train"
    assert all(e["track_id"] in m["candidates"] for e in m["entries"])
    copy = str(tmp_path / "copy.jsonl")
    made.write_manifest(copy, m)
    assert made.read_manifest(copy) == m
    with pytest.raises(made.ConfigError):
        made.gen_synth(str(tmp_path / "bad"), {"n_trakcs": 3})


@pytest.mark.skipif("MADE_CLI" not in os.environ, reason="needs the made CLI to train")
def test_model_predict_and_evaluate(tmp_path):
    root = str(tmp_path / "data")
    made.gen_synth(root, {"n_tracks": 4, "videos_per_track": 4,
                          "train_fraction": 0.5, "val_fraction": 0.25})
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 4,
                               "model": {"d": 16, "heads": 2, "decoder_ca_layers": 1}}))
    run = str(tmp_path / "run")
    subprocess.run([os.environ["MADE_CLI"], "train", "--data", root, "--config", str(cfg),
                    "--out", run], check=True, capture_output=True)
    model = made.Model(os.path.join(run, "last.ckpt"))
    assert model.d_max > 0
    tracks = sorted(os.path.join(root, "tracks", f) for f in os.listdir(os.path.join(root, "tracks")))
    video = os.path.join(root, "videos", sorted(os.listdir(os.path.join(root, "videos")))[0])
    pred = model.predict(video, tracks)
    assert len(pred["ranked"]) == len(tracks)
    scores = [r[1] for r in pred["ranked"]]
    assert scores == sorted(scores, reverse=True)
    assert all(math.isfinite(r[2]) and r[2] < r[3] for r in pred["ranked"])
    report = model.evaluate(root, "test", "msg")
    assert report["queries"] == len(made.read_manifest(os.path.join(root, "test.jsonl"))["entries"])
    with pytest.raises(made.DataError):
        made.Model(str(tmp_path / "missing.ckpt"))
