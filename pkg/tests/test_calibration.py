import json

import numpy as np
import pytest

import wtvbilevel.calibration as cal
from wtvbilevel.bilevel import BilevelConfig, TraceRecord
from wtvbilevel.calibration import (
    CalibrationError,
    Threshold,
    calibrate_threshold,
    calibration_config,
    derive_seed,
    load_dataset,
    peak_record,
)
from wtvbilevel.io import save_image


def blocks(n=16, seed=0):
    r = np.random.default_rng(seed)
    return np.kron(r.random((4, 4)), np.ones((n // 4, n // 4)))


def test_single_record_mean():
    th = calibrate_threshold([("blocks", blocks())], sigmas=[0.05], budget=8)
    assert len(th.records) == 1
    assert th.q_bar == th.records[0].q_at_peak


def test_record_cardinality_and_invariants():
    th = calibrate_threshold([("img", blocks())], sigmas=[0.01, 0.05, 0.1], budget=10)
    assert len(th.records) == 3 and not th.failures
    for r in th.records:
        assert 0 <= r.peak_iter < r.total_iters <= 10
        assert 0.5 <= r.q_at_peak <= 16 * 16 / 2
    assert th.q_bar == pytest.approx(np.mean([r.q_at_peak for r in th.records]))


def test_deterministic_and_worker_independent():
    data = [("a", blocks(seed=1)), ("b", blocks(seed=2))]
    one = calibrate_threshold(data, sigmas=[0.05, 0.1], budget=6)
    again = calibrate_threshold(data, sigmas=[0.05, 0.1], budget=6)
    two = calibrate_threshold(list(reversed(data)), sigmas=[0.1, 0.05], budget=6, workers=2)
    assert one.q_bar == again.q_bar == two.q_bar
    assert one.to_dict()["records"] == two.to_dict()["records"]


def test_seed_derivation():
    assert derive_seed(0, "a", 0.05) == derive_seed(0, "a", 0.05)
    seeds = {derive_seed(s, i, g) for s in (0, 1) for i in ("a", "b") for g in (0.01, 0.05)}
    assert len(seeds) == 8
    assert all(0 <= s < 2**64 for s in seeds)


def test_peak_is_first_maximum():
    tr = [TraceRecord(i, q, 0.0, 1, 1, 1, ipsnr=ip) for i, (q, ip) in
          enumerate([(3.0, -1.0), (1.2, 2.0), (0.95, 2.0), (0.8, 1.0)])]
    r = peak_record(tr, "x", 0.05, 0, 7)
    assert (r.peak_iter, r.peak_ipsnr, r.q_at_peak, r.total_iters) == (1, 2.0, 1.2, 4)


def _failing_run(bad_ids):
    real = cal.gd_bil

    def run(y, cfg, **kw):
        if float(np.mean(kw["x_ref"])) in bad_ids:
            raise FloatingPointError("boom")
        return real(y, cfg, **kw)

    return run


def test_failures_excluded(monkeypatch):
    data = [(f"i{k}", 0.1 * k + 0.5 * blocks(seed=k)) for k in range(11)]
    bad = {float(np.mean(data[3][1]))}
    monkeypatch.setattr(cal, "gd_bil", _failing_run(bad))
    th = calibrate_threshold(data, sigmas=[0.05], budget=3)
    assert len(th.records) == 10 and len(th.failures) == 1
    assert th.failures[0].image_id == "i3" and "boom" in th.failures[0].error
    assert th.meta["excluded"] == 1


def test_too_many_failures_refused(monkeypatch):
    data = [(f"i{k}", blocks(seed=k) + k) for k in range(5)]
    monkeypatch.setattr(cal, "gd_bil", _failing_run({float(np.mean(data[0][1]))}))
    with pytest.raises(CalibrationError):
        calibrate_threshold(data, sigmas=[0.05], budget=3)


def test_rejects_bad_input():
    with pytest.raises(CalibrationError):
        calibrate_threshold([], sigmas=[0.05])
    with pytest.raises(ValueError):
        calibrate_threshold([("a", blocks())], cfg=BilevelConfig.for_method("mse", "wtv"))
    assert calibration_config(50, stop_threshold=0.9).stop_threshold is None


def test_json_round_trip(tmp_path):
    th = calibrate_threshold([("a", blocks())], sigmas=[0.05], seeds=[4], budget=4, dataset_name="toy")
    th.save(tmp_path / "t.json")
    back = Threshold.load(tmp_path / "t.json")
    assert back.to_dict() == th.to_dict()
    d = json.loads((tmp_path / "t.json").read_text())
    assert {"q_bar", "dataset", "sigmas", "seeds", "records", "config_hash"} <= set(d)
    assert Threshold.from_dict({"q_bar": 0.9081}).q_bar == 0.9081


class TestDataset:
    def test_directory_order_and_crop(self, tmp_path):
        save_image(np.full((200, 190), 0.5), tmp_path / "b.png")
        save_image(np.full((20, 30), 0.2), tmp_path / "a.pgm")
        (tmp_path / "notes.txt").write_text("ignored")
        ds = load_dataset(tmp_path, crop=180)
        assert [i for i, _ in ds] == ["a", "b"]
        assert ds[1][1].shape == (180, 180) and ds[0][1].shape == (20, 30)

    def test_manifest(self, tmp_path):
        for name in ("x.png", "y.png", "z.png"):
            save_image(np.zeros((8, 8)), tmp_path / name)
        (tmp_path / "manifest.txt").write_text("# calibration subset\nz.png\nx.png\n")
        assert [i for i, _ in load_dataset(tmp_path)] == ["z", "x"]
        (tmp_path / "manifest.txt").write_text("missing.png\n")
        with pytest.raises(CalibrationError):
            load_dataset(tmp_path)

    def test_empty(self, tmp_path):
        with pytest.raises(CalibrationError):
            load_dataset(tmp_path)
        with pytest.raises(CalibrationError):
            load_dataset(tmp_path / "nope")
