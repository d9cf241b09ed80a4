import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.ndimage import gaussian_filter

from oracles import naive_psnr
from refbridge import metrics as mt
from refbridge.imageio import write_image
from refbridge.synthetic import checkerboard, seeded_corpus

CHECKERBOARD_SHARPNESS = 1.5535900104058271  # frozen from the summation oracle below


class Const:
    name = "const"

    def __init__(self, value):
        self.value = value

    def __call__(self, img):
        return self.value


class Lookup:
    name = "lookup"

    def __init__(self, table):
        self.table = table

    def __call__(self, img):
        return self.table[float(np.asarray(img).ravel()[0])]


def naive_luma(img):
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def naive_ssim(a, b):
    ya, yb = naive_luma(np.asarray(a, np.float64)), naive_luma(np.asarray(b, np.float64))
    x = np.arange(11) - 5.0
    g1 = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(ya.shape[0] - 10):
        for j in range(ya.shape[1] - 10):
            pa, pb = ya[i:i + 11, j:j + 11], yb[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


# ---------------------------------------------------------------------------
# relative metric
# ---------------------------------------------------------------------------

def test_relative_metric_arithmetic():
    m = Lookup({0.1: 6.0, 0.2: 5.0})
    assert mt.relative_metric(np.full((2, 2, 3), 0.1), np.full((2, 2, 3), 0.2), m) == pytest.approx(0.2, abs=1e-15)
    assert mt.relative_metric(np.zeros(3), np.zeros(3), Const(3.0)) == 0.0
    with pytest.raises(mt.DegenerateReferenceError):
        mt.relative_metric(np.zeros(3), np.zeros(3), Const(0.0))


@given(st.floats(0.1, 100), st.floats(-50, 50), st.floats(0.1, 50), st.floats(1e-3, 1e3))
def test_relative_metric_is_scale_covariant(m_rest, m_ref_sign, m_ref_mag, c):
    m_ref = math.copysign(m_ref_mag, m_ref_sign)
    table = {0.1: m_rest, 0.2: m_ref}
    a, b = np.full((1, 1, 3), 0.1), np.full((1, 1, 3), 0.2)
    scaled = Lookup({k: c * v for k, v in table.items()})
    assert mt.relative_metric(a, b, scaled) == pytest.approx(mt.relative_metric(a, b, Lookup(table)), rel=1e-12)


@pytest.mark.parametrize("img", seeded_corpus(2) + [checkerboard()])
def test_relative_metric_identity_is_zero(img):
    assert mt.relative_metric(img, img, mt.builtin_sharpness) == 0.0


# ---------------------------------------------------------------------------
# base metric and embeddings
# ---------------------------------------------------------------------------

def test_sharpness_values():
    assert mt.builtin_sharpness(np.full((9, 9, 3), 0.3)) == 1.0
    img = seeded_corpus(1)[0]
    blurred = gaussian_filter(img, sigma=(1.0, 1.0, 0))
    assert mt.builtin_sharpness(blurred) < mt.builtin_sharpness(img)
    y = checkerboard()[..., 0].astype(np.float64)
    lap = [y[i - 1, j] + y[i + 1, j] + y[i, j - 1] + y[i, j + 1] - 4 * y[i, j]
           for i in range(1, 63) for j in range(1, 63)]
    mean = sum(lap) / len(lap)
    oracle = 1 + sum((v - mean) ** 2 for v in lap) / len(lap)
    assert abs(oracle - CHECKERBOARD_SHARPNESS) < 1e-12
    assert abs(mt.builtin_sharpness(checkerboard()) - CHECKERBOARD_SHARPNESS) < 1e-12


def test_embedding_similarity(rng):
    img = rng.random((8, 8, 3))
    for provider in (mt.ChannelMeanEmbedder(), mt.TextureEmbedder()):
        assert mt.embedding_similarity(img, img, provider) == pytest.approx(1.0, abs=1e-12)
    assert mt.embedding_similarity(img, 1 - img, mt.ChannelMeanEmbedder()) == pytest.approx(-1.0, abs=1e-12)
    other = rng.random((8, 8, 3))
    a, b = img.reshape(-1, 3).mean(0) - 0.5, other.reshape(-1, 3).mean(0) - 0.5
    dot = sum(x * y for x, y in zip(a, b))
    oracle = dot / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))
    assert abs(mt.embedding_similarity(img, other, mt.ChannelMeanEmbedder()) - oracle) < 1e-6
    with pytest.raises(ValueError):
        mt.embedding_similarity(np.full((2, 2, 3), 0.5), img, mt.ChannelMeanEmbedder())


def test_embedding_similarity_ignores_positive_scaling(rng):
    img, other = rng.random((2, 8, 8, 3))

    class Scaled:
        name = "scaled"

        def __init__(self, c):
            self.c = c

        def __call__(self, x):
            return self.c * mt.TextureEmbedder()(x)

    base = mt.embedding_similarity(img, other, mt.TextureEmbedder())
    assert mt.embedding_similarity(img, other, Scaled(7.5)) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# full-reference
# ---------------------------------------------------------------------------

def test_psnr_closed_forms_and_symmetry(rng):
    a = np.full((8, 8, 3), 0.5)
    assert mt.psnr_y(a, a) == 100.0
    assert mt.psnr_y(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    b, c = rng.random((2, 16, 16, 3))
    assert mt.psnr_y(b, c) == mt.psnr_y(c, b)
    with pytest.raises(ValueError):
        mt.psnr_y(b, c[:8])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_psnr_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((20, 17, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert abs(mt.psnr_y(a, b) - naive_psnr(naive_luma(a), naive_luma(b))) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_matches_naive_sliding_window(seed):
    rng = np.random.default_rng(seed)
    a = seeded_corpus(1, size=24, seed=seed)[0].astype(np.float64)
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(mt.ssim_y(a, b) - naive_ssim(a, b)) < 1e-6
    assert mt.ssim_y(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_requires_a_full_window():
    with pytest.raises(ValueError):
        mt.ssim_y(np.zeros((10, 12, 3)), np.zeros((10, 12, 3)))


# ---------------------------------------------------------------------------
# evaluation and reports
# ---------------------------------------------------------------------------

def _eval_set(root, rng):
    imgs = {name: rng.random((16, 16, 3)).astype(np.float32) for name in ("a", "b", "gt")}
    for name, img in imgs.items():
        write_image(img, root / f"{name}.png")
    manifest = root / "eval.tsv"
    manifest.write_text("a.png\tb.png\tgt.png\nb.png\tb.png\nmissing.png\tb.png\n")
    return manifest


def test_evaluate_report(tmp_path, rng):
    manifest = _eval_set(tmp_path, rng)
    report = mt.evaluate(manifest, metadata={"seed": 3})
    ident = report.records[1]["values"]
    assert ident["sharpness_re"] == 0.0 and ident["clipq"] == pytest.approx(1.0) and "psnr_y" not in ident
    assert report.records[2]["failure"].startswith(("FileNotFoundError", "OSError"))
    assert report.aggregates["psnr_y"] == report.records[0]["values"]["psnr_y"]
    assert report.aggregates["sharpness_re"] == pytest.approx(
        (report.records[0]["values"]["sharpness_re"] + 0.0) / 2)
    assert report.digest() == mt.evaluate(manifest, metadata={"seed": 3}).digest()
    text, js = report.write(tmp_path / "report.txt")
    assert "FAILED" in text.read_text() and js.exists()


def test_empty_manifest_report(tmp_path):
    (tmp_path / "empty.tsv").write_text("")
    report = mt.evaluate(tmp_path / "empty.tsv")
    assert report.aggregates == {} and report.metadata["status"] == "no samples"
    assert "no samples" in report.to_text()


def test_imported_scores(tmp_path, rng):
    manifest = _eval_set(tmp_path, rng)
    scores = tmp_path / "scores.txt"
    scores.write_text("a.png musiq 60\nb.png musiq 50\n# comment\n")
    table = mt.read_scores(scores)
    report = mt.evaluate(manifest, metrics=("psnr_y",), external_scores=table)
    assert report.records[0]["values"]["musiq"] == 60.0
    assert report.records[0]["values"]["musiq_re"] == pytest.approx(0.2)
    assert report.records[1]["values"]["musiq_re"] == 0.0
    bad = tmp_path / "bad.txt"
    bad.write_text("onlyone\n")
    with pytest.raises(ValueError):
        mt.read_scores(bad)
