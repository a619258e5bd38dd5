"""Image quality metrics and the evaluation report.

Inputs are unit-range ``H x W x 3`` arrays. SSIM and the edge ratio work on
the gray (RGB mean) image.
"""

import datetime
import hashlib
import json
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GeometryError
from .imageproc import load_image, resize

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EDGE_FRACTION = 0.1
EDGE_EPS = 1e-6
INF = "inf"  # JSON stand-in for an infinite PSNR


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """``10 log10(1 / MSE)`` in dB; ``math.inf`` for identical images."""
    a, b = _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gray(image):
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=2) if image.ndim == 3 else image


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' filtering with a 1-D kernel along both axes."""
    k = len(g)
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2, data_range=1.0):
    """Mean SSIM over every full Gaussian window position of the gray images."""
    a, b = _same_shape(a, b)
    x, y = gray(a), gray(b)
    if min(x.shape) < window:
        raise GeometryError(f"SSIM needs images of at least {window}x{window}, got {x.shape}")
    g = gaussian_window(window, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def sobel_magnitude(img):
    """Sobel gradient magnitude over interior pixels (output is 2 smaller per axis)."""
    win = sliding_window_view(img, (3, 3))
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    gx = np.einsum("ijkl,kl->ij", win, kx)
    gy = np.einsum("ijkl,kl->ij", win, kx.T)
    return np.hypot(gx, gy)


class EdgeRatio(NamedTuple):
    value: float
    edges_found: bool


def edge_gradient_ratio(foggy, defogged):
    """Mean gradient gain over visible edges of the defogged image (simplified).

    Visible edges are pixels whose defogged Sobel magnitude exceeds 0.1 of its
    maximum. With no such pixel the sentinel 1.0 is returned and
    ``edges_found`` is False.
    """
    foggy, defogged = _same_shape(foggy, defogged)
    gf = sobel_magnitude(gray(foggy))
    gd = sobel_magnitude(gray(defogged))
    peak = gd.max() if gd.size else 0.0
    edges = gd > EDGE_FRACTION * peak
    if peak <= 0 or not edges.any():
        return EdgeRatio(1.0, False)
    return EdgeRatio(float(np.mean(gd[edges] / (gf[edges] + EDGE_EPS))), True)


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


def _json_psnr(v):
    return INF if v is None or math.isinf(v) else float(v)


def _mean(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(np.mean(values)) if not any(math.isinf(v) for v in values) else math.inf


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def evaluate(items, defog, checkpoint_id="", dataset=""):
    """Run ``defog`` on each item and score it.

    ``items`` is a sequence of ``(name, foggy_path, reference_path_or_None)``;
    ``defog`` maps a unit image to a unit image of the same size. Items that
    cannot be read or processed get an ``error`` entry instead of scores.
    """
    records = []
    for name, foggy_path, ref_path in items:
        rec = {"name": name, "psnr_db": None, "ssim": None, "edge_gradient_ratio": None, "edges_found": None}
        try:
            foggy = load_image(foggy_path)
            out = defog(foggy)
            edge = edge_gradient_ratio(foggy, out)
            rec["edge_gradient_ratio"] = edge.value
            rec["edges_found"] = edge.edges_found
            if ref_path is not None:
                ref = load_image(ref_path)
                if ref.shape != out.shape:
                    ref = resize(ref, *out.shape[:2])
                rec["psnr_db"] = psnr(out, ref)
                rec["ssim"] = ssim(out, ref)
        except Exception as exc:  # record-level failure, keep going
            rec["error"] = f"{type(exc).__name__}: {exc}"
        records.append(rec)
    return build_report(records, checkpoint_id, dataset)


def build_report(records, checkpoint_id="", dataset=""):
    ok = [r for r in records if "error" not in r]
    if not records:
        agg = {"count": 0, "scored": 0, "psnr_db": 0.0, "ssim": 0.0, "edge_gradient_ratio": 0.0}
        return _report(agg, records, checkpoint_id, dataset)
    agg = {
        "count": len(records),
        "scored": len(ok),
        "psnr_db": _mean([r["psnr_db"] for r in ok]),
        "ssim": _mean([r["ssim"] for r in ok]),
        "edge_gradient_ratio": _mean([r["edge_gradient_ratio"] for r in ok]),
    }
    return _report(agg, records, checkpoint_id, dataset)


def _report(agg, records, checkpoint_id, dataset):
    return {
        "metadata": {
            "checkpoint": checkpoint_id,
            "dataset": str(dataset),
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
            "edge_metric": "simplified visible-edge gradient ratio",
        },
        "records": records,
        "aggregate": agg,
    }


def report_to_json(report):
    """Replace infinities with the ``"inf"`` marker so the report is strict JSON."""

    def fix(rec):
        out = dict(rec)
        if "psnr_db" in out and out["psnr_db"] is not None:
            out["psnr_db"] = _json_psnr(out["psnr_db"])
        return out

    return {
        "metadata": report["metadata"],
        "records": [fix(r) for r in report["records"]],
        "aggregate": fix(report["aggregate"]),
    }


def write_report(report, path):
    Path(path).write_text(json.dumps(report_to_json(report), indent=2) + "\n")


REPORT_SCHEMA = {
    "type": "object",
    "required": ["metadata", "records", "aggregate"],
    "properties": {
        "metadata": {
            "type": "object",
            "required": ["checkpoint", "dataset", "timestamp", "edge_metric"],
            "properties": {
                "checkpoint": {"type": "string"},
                "dataset": {"type": "string"},
                "timestamp": {"type": "string"},
                "edge_metric": {"type": "string"},
            },
        },
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "psnr_db", "ssim", "edge_gradient_ratio", "edges_found"],
                "properties": {
                    "name": {"type": "string"},
                    "psnr_db": {"anyOf": [{"type": "number"}, {"const": INF}, {"type": "null"}]},
                    "ssim": {"anyOf": [{"type": "number", "minimum": -1, "maximum": 1}, {"type": "null"}]},
                    "edge_gradient_ratio": {"type": ["number", "null"]},
                    "edges_found": {"type": ["boolean", "null"]},
                    "error": {"type": "string"},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["count", "scored", "psnr_db", "ssim", "edge_gradient_ratio"],
            "properties": {
                "count": {"type": "integer", "minimum": 0},
                "scored": {"type": "integer", "minimum": 0},
                "psnr_db": {"anyOf": [{"type": "number"}, {"const": INF}, {"type": "null"}]},
                "ssim": {"type": ["number", "null"]},
                "edge_gradient_ratio": {"type": ["number", "null"]},
            },
        },
    },
}
