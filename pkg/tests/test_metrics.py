import json

import numpy as np
import pytest

from p4dgs import metrics


def test_psnr_identical_images_sentinel():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert metrics.psnr(img, img) == 99.0


def test_psnr_known_value():
    # constant offset of 0.1 -> MSE 0.01 -> exactly 20 dB
    a = np.zeros((16, 16, 3))
    b = np.full((16, 16, 3), 0.1)
    assert metrics.psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_direct_formula():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(12, 9, 3))
    b = np.clip(a + rng.normal(0, 0.05, size=a.shape), 0, 1)
    ref = 10.0 * np.log10(1.0 / np.mean((a - b) ** 2))
    assert metrics.psnr(a, b) == pytest.approx(ref, abs=1e-9)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.2, 0.8, size=(24, 24, 3))
    vals = []
    for sigma in [0.01, 0.02, 0.05, 0.1, 0.2]:
        b = np.clip(a + rng.normal(0, sigma, size=a.shape), 0, 1)
        vals.append(metrics.psnr(a, b))
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        metrics.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_identical_is_one():
    img = np.random.default_rng(3).uniform(size=(16, 16, 3))
    assert metrics.ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_degrades_with_noise():
    rng = np.random.default_rng(4)
    a = rng.uniform(0.2, 0.8, size=(24, 24, 3))
    clean = metrics.ssim(a, np.clip(a + rng.normal(0, 0.01, a.shape), 0, 1))
    dirty = metrics.ssim(a, np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1))
    assert clean > dirty


def test_report_roundtrip(tmp_path):
    rep = metrics.EvalReport(compressed_bytes=3 * 1024 * 1024, rate_gap_percent=0.7)
    rep.add_frame("r_0", 0.0, 31.5, 0.95, 12.0)
    rep.add_frame("r_1", 0.5, 29.5, 0.93, 11.0)
    assert rep.mean_psnr == pytest.approx(30.5)
    assert rep.mean_ssim == pytest.approx(0.94)

    jpath = tmp_path / "report.json"
    cpath = tmp_path / "report.csv"
    rep.write_json(jpath)
    rep.write_csv(cpath)

    loaded = json.loads(jpath.read_text())
    assert loaded["summary"]["mean_psnr_db"] == pytest.approx(30.5)
    assert loaded["summary"]["compressed_mb"] == pytest.approx(3.0)
    assert loaded["summary"]["lpips"].startswith("n/a")
    assert len(loaded["frames"]) == 2

    lines = cpath.read_text().strip().splitlines()
    assert lines[0] == "frame,time,psnr_db,ssim,render_ms"
    assert len(lines) == 3
    assert lines[1].startswith("r_0,0.0,31.5")
