import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spmae import imgstats as ist
from spmae import kernels
from spmae import patterngen as pg
from spmae.imageio import read_pnm, write_pnm


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def entropy_oracle(values, bins=256):
    counts = [0] * bins
    flat = [min(max(float(v), 0.0), 1.0) for v in np.ravel(values)]
    for v in flat:
        counts[min(int(v * bins), bins - 1)] += 1
    n = len(flat)
    return -sum(c / n * math.log2(c / n) for c in counts if c)


def tv_oracle(img):
    c, h, w = img.shape
    total = 0.0
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                if x + 1 < w:
                    total += abs(img[ch, y, x + 1] - img[ch, y, x])
                if y + 1 < h:
                    total += abs(img[ch, y + 1, x] - img[ch, y, x])
    return total / (c * h * w)


def pearson_oracle(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sx = math.sqrt(sum((a - mx) ** 2 for a in xs))
    sy = math.sqrt(sum((b - my) ** 2 for b in ys))
    return cov / (sx * sy)


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------


def test_uniform_histogram_is_8_bits():
    centers = (np.arange(256) + 0.5) / 256
    img = np.stack([centers.reshape(16, 16)] * 3)
    assert ist.color_entropy(img) == pytest.approx(8.0, abs=1e-9)


def test_constant_image_zero_entropy():
    img = np.full((3, 8, 8), 0.4)
    assert ist.color_entropy(img) == 0.0
    assert ist.brightness_entropy(img) == 0.0


def test_entropy_matches_counting_oracle(rng):
    img = rng.random((3, 16, 16))
    expected = np.mean([entropy_oracle(ch) for ch in img])
    assert abs(ist.color_entropy(img) - expected) < 1e-9
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    assert abs(ist.brightness_entropy(img) - entropy_oracle(gray)) < 1e-9


def test_gray_image_brightness_equals_color_entropy(rng):
    plane = rng.random((16, 16))
    img = np.stack([plane] * 3)
    assert abs(ist.brightness_entropy(img) - ist.color_entropy(img)) < 1e-9


def test_color_entropy_needs_three_channels():
    with pytest.raises(ist.ShapeError):
        ist.color_entropy(np.zeros((1, 4, 4)))


@given(arrays(np.float64, (2, 5, 7), elements=st.floats(-0.5, 1.5)), st.integers(2, 300))
def test_entropy_bounds(img, bins):
    e = ist.histogram_entropy(img, bins)
    assert 0.0 <= e <= math.log2(bins) + 1e-12


# ---------------------------------------------------------------------------
# total variation
# ---------------------------------------------------------------------------


def test_tv_hand_case():
    assert ist.total_variation(np.array([[[0.0, 1.0], [0.0, 1.0]]])) == 0.5


def test_tv_constant():
    assert ist.total_variation(np.full((3, 9, 9), 0.7)) == 0.0


def test_tv_matches_loop_oracle(rng):
    img = rng.random((3, 16, 16))
    assert abs(ist.total_variation(img) - tv_oracle(img)) < 1e-9


def test_tv_rejects_tiny_images():
    with pytest.raises(ist.ShapeError):
        ist.total_variation(np.zeros((1, 1, 5)))


@given(arrays(np.float64, (2, 6, 6), elements=st.floats(-2, 2)),
       arrays(np.float64, (2, 6, 6), elements=st.floats(-2, 2)))
def test_tv_subadditive(a, b):
    assert ist.total_variation(a + b) <= ist.total_variation(a) + ist.total_variation(b) + 1e-12


@given(arrays(np.float64, (1, 6, 6), elements=st.floats(-3, 3)), st.floats(0, 10))
def test_tv_scale_equivariance(img, c):
    assert abs(ist.total_variation(c * img) - c * ist.total_variation(img)) < 1e-9


# ---------------------------------------------------------------------------
# Canny
# ---------------------------------------------------------------------------


def step_image(size=64):
    img = np.zeros((1, size, size))
    img[:, :, size // 2:] = 1.0
    return img


def test_constant_image_no_edges():
    assert ist.edge_density(np.full((3, 32, 32), 0.3)) == 0.0


def test_step_edge_single_column():
    edges = ist.canny(step_image())
    cols = np.nonzero(edges.any(axis=0))[0]
    assert len(cols) == 1 and cols[0] in (31, 32)
    assert edges[:, cols[0]].all()
    d = ist.edge_density(step_image())
    assert 1 / 64 - 2 / 64 <= d <= 1 / 64 + 2 / 64


def test_step_edge_analytic_nms():
    # hand check: after blurring a 0/1 step, |Sobel x| peaks on the two columns either
    # side of the boundary with equal value; NMS (>= before, > after) keeps the second
    g = ist.gaussian_kernel(1.4, 5)
    row = np.zeros(64)
    row[32:] = 1.0
    blurred = np.convolve(np.pad(row, 2, mode="edge"), g.sum(axis=0)[::-1], mode="valid")
    sob = np.abs(4 * (np.roll(blurred, -1) - np.roll(blurred, 1)))[1:-1]
    peak = np.flatnonzero(sob == sob.max()) + 1
    assert list(peak) == [31, 32]
    assert np.nonzero(ist.canny(step_image()).any(axis=0))[0][0] == 32


def test_checkerboard_denser_than_step():
    # 8-pixel squares: each boundary survives the 5x5 blur
    yy, xx = np.mgrid[0:64, 0:64]
    board = (((yy // 8) + (xx // 8)) % 2).astype(np.float64)[None]
    assert ist.edge_density(board) > ist.edge_density(step_image())


def test_one_pixel_checkerboard_has_no_sobel_response():
    # Sobel sums [1,2,1] across rows, which cancels the +-1 alternation exactly
    yy, xx = np.mgrid[0:16, 0:16]
    board = ((yy + xx) % 2).astype(np.float64)
    gx = ist._correlate(board, ist.SOBEL_X)
    assert np.all(gx[1:-1, 1:-1] == 0.0)


@given(arrays(np.float64, (3, 12, 12), elements=st.floats(0, 1)))
def test_edge_density_inversion_invariant(img):
    assert ist.edge_density(img) == ist.edge_density(1.0 - img)


def test_inversion_invariant_on_generated_images():
    for fam in pg.Family:
        img = pg.generate(pg.GeneratorSpec(fam, 32, 32, seed=11))
        assert np.array_equal(ist.canny(img), ist.canny(1.0 - img))


def test_gradient_sectors():
    gx = np.array([1.0, 0.0, 1.0, -1.0, 0.0])
    gy = np.array([0.0, 1.0, 1.0, 1.0, 0.0])
    assert list(ist.gradient_sectors(gx, gy)) == [0, 2, 1, 3, 0]


def test_canny_params_validation():
    with pytest.raises(ValueError):
        ist.canny(step_image(), ist.CannyParams(low=0.3, high=0.2))
    with pytest.raises(ValueError):
        ist.canny(step_image(), ist.CannyParams(kernel_size=4))


def test_hysteresis_keeps_weak_connected_to_strong():
    strong = np.zeros((5, 5), dtype=bool)
    weak = np.zeros((5, 5), dtype=bool)
    strong[0, 0] = True
    weak[0, 0] = weak[1, 1] = weak[2, 2] = True  # diagonal chain
    weak[4, 0] = True  # isolated
    out = kernels.hysteresis(strong, weak)
    assert out[2, 2] and not out[4, 0]


# ---------------------------------------------------------------------------
# dataset statistics
# ---------------------------------------------------------------------------


def manifest_of(tmp_path, name, images):
    d = tmp_path / name
    d.mkdir()
    files = []
    for i, img in enumerate(images):
        rel = f"{i:06d}.ppm"
        write_pnm(str(d / rel), img)
        files.append({"path": rel, "seed": i})
    return pg.DatasetManifest(name, "fixture", images[0].shape[2], images[0].shape[1], 3, 0, files,
                              root=str(d))


def quantized(img):
    return np.rint(img * 255) / 255


def test_dataset_of_identical_images(tmp_path, rng):
    img = quantized(rng.random((3, 16, 16)))
    m = manifest_of(tmp_path, "same", [img, img])
    stats = ist.dataset_stats(m)
    assert stats.values() == ist.image_stats(read_pnm(m.paths()[0]))
    assert stats.sample_count == 2


def test_constant_dataset_stats(tmp_path):
    img = np.full((3, 16, 16), 128 / 255)
    assert ist.dataset_stats(manifest_of(tmp_path, "flat", [img] * 3)).values() == (0.0, 0.0, 0.0, 0.0)


def test_aggregate_is_order_independent(rng):
    rows = [tuple(rng.random(4)) for _ in range(50)]
    a = ist.aggregate_stats(rows)
    b = ist.aggregate_stats(rows[::-1])
    assert a == b


def test_noise_has_more_tv_than_shader():
    def mean_tv(family, **params):
        return np.mean([ist.total_variation(pg.generate(pg.GeneratorSpec(family, 32, 32, seed=s, params=params)))
                        for s in range(64)])
    assert mean_tv("spectral-noise", alpha=0.0) > mean_tv("shader-like")


def test_missing_image_reported(tmp_path, rng):
    m = manifest_of(tmp_path, "gone", [quantized(rng.random((3, 8, 8)))])
    m.files.append({"path": "missing.ppm", "seed": 1})
    with pytest.raises(FileNotFoundError, match="missing.ppm"):
        ist.dataset_stats(m)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


def test_pearson_perfect():
    assert ist.pearson_r([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-12)
    assert ist.pearson_r([1, 2, 3], [6, 4, 2]) == pytest.approx(-1.0, abs=1e-12)


def test_pearson_matches_oracle(rng):
    xs, ys = list(rng.random(14)), list(rng.random(14))
    assert abs(ist.pearson_r(xs, ys) - pearson_oracle(xs, ys)) < 1e-12


def test_pearson_constant_is_error():
    with pytest.raises(ist.CorrelationError):
        ist.pearson_r([1, 1, 1], [1, 2, 3])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=20).filter(lambda v: np.ptp(v) > 1e-3),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(xs, a, b):
    ys = [math.sin(x) + 0.01 * x for x in xs]
    if np.ptp(ys) < 1e-6:
        return
    r = ist.pearson_r(xs, ys)
    assert abs(ist.pearson_r([a * x + b for x in xs], ys) - r) < 1e-9
    assert abs(ist.pearson_r([-a * x + b for x in xs], ys) + r) < 1e-9


def fake_stats(v):
    return ist.DatasetStats(*v, sample_count=1)


def test_report_tv_identity_and_csv(tmp_path):
    stats = [("a", fake_stats((1.0, 2.0, 0.1, 0.3))), ("b", fake_stats((2.0, 1.0, 0.2, 0.1))),
             ("c", fake_stats((4.0, 3.0, 0.5, 0.2)))]
    scores = {name: s.mean_total_variation for name, s in stats}
    report = ist.correlation_report(stats, scores, csv_path=str(tmp_path / "r.csv"))
    assert report.r["mean_tv"] == 1.0
    for i, prop in enumerate(ist.PROPERTIES):
        xs = [s.values()[i] for _, s in stats]
        assert abs(report.r[prop] - pearson_oracle(xs, [scores[n] for n, _ in stats])) < 1e-12
    text = (tmp_path / "r.csv").read_bytes().decode("utf-8")
    lines = text.split("\n")
    assert lines[0] == "dataset,color_entropy,brightness_entropy,mean_tv,mean_edge_density,score"
    assert lines[1] == "a,1.000000,2.000000,0.100000,0.300000,0.100000"
    assert lines[4].startswith("r,") and lines[4].count(",") == 5 and lines[4].endswith(",")
    assert "\r" not in text and text.endswith("\n")


def test_report_join_errors():
    stats = [(n, fake_stats((i, i, i, i))) for i, n in enumerate("abc")]
    with pytest.raises(ist.JoinError):
        ist.correlation_report(stats, {"a": 1, "b": 2, "z": 3})
    with pytest.raises(ValueError):
        ist.correlation_report(stats[:2], {"a": 1, "b": 2})
