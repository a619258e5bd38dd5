import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from haan import metrics as M
from haan.errors import DimensionError, GeometryError


def ssim_oracle(a, b):
    """Direct windowed SSIM: explicit 2-D kernel, explicit loops over positions."""
    x = a.mean(axis=2)
    y = b.mean(axis=2)
    r = 5
    kern = np.array([[math.exp(-(i * i + j * j) / (2 * 1.5**2)) for j in range(-r, r + 1)] for i in range(-r, r + 1)])
    kern /= kern.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
            mx, my = (kern * px).sum(), (kern * py).sum()
            vx = (kern * (px - mx) ** 2).sum()
            vy = (kern * (py - my) ** 2).sum()
            cov = (kern * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def gradient_fixture():
    yy, xx = np.mgrid[0:16, 0:16] / 15.0
    img = np.stack([xx, yy, 0.5 * (xx + yy)], axis=2)
    noisy = np.clip(img + 0.05 * np.random.default_rng(42).standard_normal(img.shape), 0, 1)
    return img, noisy


def test_psnr_examples(rng):
    a = rng.random((8, 8, 3)) * 0.8
    assert M.psnr(a, a) == math.inf
    assert M.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert M.psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0
    with pytest.raises(DimensionError):
        M.psnr(a, a[:4])


def test_ssim_identity_exact(rng):
    for _ in range(5):
        a = rng.random((20, 17, 3))
        assert M.ssim(a, a) == 1.0


def test_ssim_inverted_image_below_one(rng):
    a = rng.random((16, 16, 3))
    assert M.ssim(a, 1 - a) < 1.0


def test_ssim_matches_oracle():
    img, noisy = gradient_fixture()
    assert abs(M.ssim(img, noisy) - ssim_oracle(img, noisy)) < 1e-6
    r = np.random.default_rng(5)
    a, b = r.random((24, 19, 3)), r.random((24, 19, 3))
    assert abs(M.ssim(a, b) - ssim_oracle(a, b)) < 1e-6


def test_ssim_too_small():
    with pytest.raises(GeometryError):
        M.ssim(np.zeros((10, 30, 3)), np.zeros((10, 30, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_metrics_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((12, 13, 3)), r.random((12, 13, 3))
    assert M.psnr(a, b) == M.psnr(b, a)
    s = M.ssim(a, b)
    assert s == M.ssim(b, a)
    assert -1 <= s <= 1


def test_edge_ratio_examples(rng):
    yy, xx = np.mgrid[0:20, 0:20]
    base = np.repeat((0.3 + 0.2 * ((xx // 5 + yy // 5) % 2))[..., None], 3, axis=2)
    same = M.edge_gradient_ratio(base, base)
    assert same.edges_found and same.value == pytest.approx(1.0, rel=1e-5)
    doubled = M.edge_gradient_ratio(base, 2 * base)
    assert doubled.value == pytest.approx(2.0, rel=1e-5)
    flat = M.edge_gradient_ratio(base, np.full_like(base, 0.4))
    assert flat == (1.0, False)


def test_sobel_oracle():
    img = np.arange(25, dtype=float).reshape(5, 5)  # d/dx = 1, d/dy = 5 per pixel
    mag = M.sobel_magnitude(img)
    np.testing.assert_allclose(mag, np.hypot(8.0, 40.0))


# -- evaluation report -------------------------------------------------------------


def _write(path, arr):
    Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)


def test_evaluate_identity_and_schema(tmp_path, rng):
    items = []
    for i in range(3):
        p = tmp_path / f"{i}.png"
        _write(p, rng.random((16, 16, 3)))
        items.append((p.stem, p, p))
    (tmp_path / "bad.png").write_bytes(b"not a png")
    items.append(("bad", tmp_path / "bad.png", None))
    report = M.evaluate(items, lambda im: im, checkpoint_id="x", dataset=tmp_path)
    recs = report["records"]
    assert [r["ssim"] for r in recs[:3]] == [1.0, 1.0, 1.0]
    assert all(r["psnr_db"] == math.inf for r in recs[:3])
    assert "error" in recs[3] and "bad.png" in recs[3]["error"]
    assert report["aggregate"]["ssim"] == 1.0
    assert report["aggregate"]["psnr_db"] == math.inf
    out = tmp_path / "r.json"
    M.write_report(report, out)
    loaded = json.loads(out.read_text())
    jsonschema.validate(loaded, M.REPORT_SCHEMA)
    assert loaded["aggregate"]["psnr_db"] == "inf"


def test_evaluate_aggregates_are_means(tmp_path, rng):
    items = []
    for i in range(4):
        f, c = tmp_path / f"f{i}.png", tmp_path / f"c{i}.png"
        _write(f, rng.random((16, 16, 3)))
        _write(c, rng.random((16, 16, 3)))
        items.append((str(i), f, c))
    report = M.evaluate(items, lambda im: np.clip(im * 0.9 + 0.05, 0, 1))
    for key in ("psnr_db", "ssim", "edge_gradient_ratio"):
        vals = [r[key] for r in report["records"]]
        assert abs(report["aggregate"][key] - np.mean(vals)) < 1e-12
    jsonschema.validate(M.report_to_json(report), M.REPORT_SCHEMA)


def test_evaluate_empty():
    report = M.evaluate([], lambda im: im)
    assert report["records"] == []
    assert report["aggregate"] == {"count": 0, "scored": 0, "psnr_db": 0.0, "ssim": 0.0, "edge_gradient_ratio": 0.0}
