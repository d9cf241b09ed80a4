"""Image quality metrics.

* :func:`relative_metric` turns any no-reference score into a distance to a
  known-good reference: ``|m(restored) - m(ref)| / |m(ref)|``.
* :func:`embedding_similarity` is cosine similarity of whole-image embeddings
  from an :class:`EmbeddingProvider`.
* :func:`psnr_y` / :func:`ssim_y` are full-reference scores on BT.601 luma.

External scorers plug in through :class:`ScoreTableMetric` (a name -> value
per image table read from a scores file).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.ndimage import convolve, correlate1d

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class DegenerateReferenceError(ZeroDivisionError):
    pass


class BaseMetric(Protocol):
    name: str

    def __call__(self, img) -> float: ...


class EmbeddingProvider(Protocol):
    name: str

    def __call__(self, img) -> np.ndarray: ...


def luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ LUMA


def relative_metric(restored, ref, metric):
    """Normalised deviation of ``metric`` between a restored image and its reference."""
    m_ref = float(metric(ref))
    if abs(m_ref) < 1e-12:
        raise DegenerateReferenceError(f"metric {getattr(metric, 'name', metric)!r} is ~0 on the reference")
    return abs(float(metric(restored)) - m_ref) / abs(m_ref)


LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class Sharpness:
    """1 + variance of the 3x3 Laplacian over the valid interior of the luma."""

    name = "sharpness"

    def __call__(self, img):
        y = luma(img)
        if y.size == 0:
            raise ValueError("empty image")
        if min(y.shape) < 3:
            return 1.0
        lap = convolve(y, LAPLACIAN, mode="constant")[1:-1, 1:-1]
        return 1.0 + float(lap.var())


builtin_sharpness = Sharpness()


class ScoreTableMetric:
    """A metric whose values come from a precomputed table keyed by image path."""

    def __init__(self, name, table):
        self.name = name
        self.table = dict(table)

    def score(self, path):
        key = str(path)
        if key not in self.table:
            raise KeyError(f"no {self.name!r} score for {key}")
        return self.table[key]


def read_scores(path):
    """Parse ``image-path metric-name value`` lines into {metric: {path: value}}."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(None, 2)
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 'path metric value'")
        img, name, val = parts
        out.setdefault(name, {})[img] = float(val)
    return out


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

class ChannelMeanEmbedder:
    """Per-channel means minus 0.5 (so an image and its negative are antipodal)."""

    name = "channel_mean"

    def __call__(self, img):
        img = np.asarray(img, dtype=np.float64)
        return img.reshape(-1, img.shape[-1]).mean(axis=0) - 0.5


class TextureEmbedder:
    """Position-free texture statistics: colour moments plus a histogram of
    luma gradient orientations weighted by magnitude, at two scales."""

    name = "texture"

    def __init__(self, bins=8):
        self.bins = bins

    def __call__(self, img):
        img = np.asarray(img, dtype=np.float64)
        flat = img.reshape(-1, img.shape[-1])
        feats = [flat.mean(axis=0) - 0.5, flat.std(axis=0)]
        y = luma(img)
        for step in (1, 2):
            gy = y[step:, :-step] - y[:-step, :-step]
            gx = y[:-step, step:] - y[:-step, :-step]
            mag = np.hypot(gx, gy)
            ang = np.mod(np.arctan2(gy, gx), np.pi)
            hist, _ = np.histogram(ang, bins=self.bins, range=(0, np.pi), weights=mag)
            feats.append(hist / max(mag.size, 1))
        return np.concatenate(feats)


def embedding_similarity(restored, ref, provider):
    a = np.asarray(provider(restored), dtype=np.float64).ravel()
    b = np.asarray(provider(ref), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding widths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# full-reference
# ---------------------------------------------------------------------------

def _pair_luma(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"extents differ: {a.shape} vs {b.shape}")
    return luma(a), luma(b)


def psnr_y(a, b):
    ya, yb = _pair_luma(a, b)
    err = float(np.mean((ya - yb) ** 2))
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    half = len(g) // 2
    out = correlate1d(x, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[half:x.shape[0] - half, half:x.shape[1] - half]


def ssim_y(a, b):
    """Mean SSIM over all fully-inside 11x11 Gaussian windows of the luma."""
    ya, yb = _pair_luma(a, b)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ya.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mu_a = _filter_valid(ya, g)
    mu_b = _filter_valid(yb, g)
    saa = _filter_valid(ya * ya, g) - mu_a ** 2
    sbb = _filter_valid(yb * yb, g) - mu_b ** 2
    sab = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# batch evaluation / reports
# ---------------------------------------------------------------------------

DEFAULT_METRICS = ("sharpness_re", "clipq", "dinoq", "psnr_y", "ssim_y")


@dataclass
class MetricReport:
    records: list = field(default_factory=list)   # [{"path":..., "values": {...}, "failure": str|None}]
    aggregates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {"metadata": self.metadata, "records": self.records, "aggregates": self.aggregates}

    def to_text(self):
        lines = [f"# {k}={v}" for k, v in sorted(self.metadata.items())]
        for rec in self.records:
            if rec.get("failure"):
                lines.append(f"{rec['path']}\tFAILED\t{rec['failure']}")
                continue
            pairs = "\t".join(f"{k}={v:.6f}" for k, v in rec["values"].items())
            lines.append(f"{rec['path']}\t{pairs}")
        lines.append("[aggregate]")
        if not self.aggregates:
            lines.append("no samples")
        for k, v in self.aggregates.items():
            lines.append(f"{k}={v:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        """Write the text report to ``path`` and the JSON variant beside it."""
        path = Path(path)
        path.write_text(self.to_text())
        json_path = path.with_suffix(".json")
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path, json_path

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def read_eval_manifest(path):
    """Lines of ``restored<TAB>reference[<TAB>ground_truth]``, relative to the manifest."""
    path = Path(path)
    root = path.parent
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise ValueError(f"{path}:{n}: expected 2 or 3 tab-separated columns")
        rows.append(tuple(root / c for c in cols) + ((None,) if len(cols) == 2 else ()))
    return rows


def _builtin_values(restored, ref, gt, metrics):
    vals = {}
    for name in metrics:
        if name == "sharpness_re":
            vals[name] = relative_metric(restored, ref, builtin_sharpness)
        elif name == "clipq":
            vals[name] = embedding_similarity(restored, ref, TextureEmbedder())
        elif name == "dinoq":
            vals[name] = embedding_similarity(restored, ref, ChannelMeanEmbedder())
        elif name in ("psnr_y", "ssim_y"):
            if gt is not None:
                vals[name] = psnr_y(restored, gt) if name == "psnr_y" else ssim_y(restored, gt)
        else:
            raise ValueError(f"unknown metric {name!r}")
    return vals


def evaluate(manifest, metrics=DEFAULT_METRICS, external_scores=None, metadata=None):
    """Score every row of an evaluation manifest.

    ``external_scores`` ({metric: {path: value}}, see :func:`read_scores`) adds
    imported values verbatim and, when the reference also has a score, the
    relative form under ``<metric>_re``.  A row whose files cannot be read gets
    a failure note; the run continues.
    """
    from .imageio import read_image

    rows = read_eval_manifest(manifest)
    root = Path(manifest).parent
    report = MetricReport(metadata=dict(metadata or {}))
    report.metadata.setdefault("manifest", Path(manifest).name)
    report.metadata.setdefault("metrics", ",".join(metrics))
    sums = {}
    counts = {}
    for restored_p, ref_p, gt_p in rows:
        rel = restored_p.relative_to(root).as_posix()
        rec = {"path": rel, "values": {}, "failure": None}
        try:
            restored = read_image(restored_p)
            ref = read_image(ref_p)
            gt = read_image(gt_p) if gt_p is not None else None
            rec["values"] = _builtin_values(restored, ref, gt, metrics)
        except (OSError, ValueError) as exc:
            rec["failure"] = f"{type(exc).__name__}: {exc}"
        if external_scores and rec["failure"] is None:
            ref_rel = ref_p.relative_to(root).as_posix()
            for mname, table in sorted(external_scores.items()):
                if rel in table:
                    rec["values"][mname] = table[rel]
                    if ref_rel in table and abs(table[ref_rel]) >= 1e-12:
                        rec["values"][f"{mname}_re"] = abs(table[rel] - table[ref_rel]) / abs(table[ref_rel])
        report.records.append(rec)
        for k, v in rec["values"].items():
            sums[k] = sums.get(k, 0.0) + v
            counts[k] = counts.get(k, 0) + 1
    report.aggregates = {k: sums[k] / counts[k] for k in sums}
    report.metadata["samples"] = len(rows)
    if not rows:
        report.metadata["status"] = "no samples"
    return report
