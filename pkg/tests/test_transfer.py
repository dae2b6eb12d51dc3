import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spmae import mae
from spmae import tensorcore as tc
from spmae import transfer as tr
from spmae.imageio import write_pnm

SRC = mae.MaeConfig(channels=3, height=8, width=8, patch=4, dim=8, depth=1, heads=2, decoder_dim=8,
                    decoder_depth=1, decoder_heads=2, seed=1)


def source_checkpoint():
    return mae.Checkpoint(SRC, mae.init_params(SRC))


def write_task(root, n_train=12, n_test=6, shape=(1, 16, 16), kind="single", fmt="spma"):
    rng = np.random.default_rng(0)
    doc = {"classes": ["a", "b", "c"], "label_kind": kind, "train": [], "test": []}
    for split, n in (("train", n_train), ("test", n_test)):
        for i in range(n):
            label = i % 3
            x = rng.random(shape) * 0.2
            x[:, :, label * shape[2] // 3:(label + 1) * shape[2] // 3] += 0.8
            rel = f"{split}_{i}.{fmt}"
            if fmt == "spma":
                tc.save_tensors(str(root / rel), {"x": x.astype(np.float32)})
            else:
                write_pnm(str(root / rel), np.clip(x, 0, 1))
            entry = {"path": rel}
            if kind == "single":
                entry["label"] = label
            else:
                entry["labels"] = [int(label == k) for k in range(3)]
            doc[split].append(entry)
    path = root / "task.json"
    path.write_text(json.dumps(doc))
    return tr.load_task(str(path))


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------


def test_collapse_scalar_toy():
    w = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    collapsed = tr.collapse_patch_embed_channels(w)
    assert collapsed.shape == (1, 1) and collapsed[0, 0] == 6.0
    x = 5.0
    assert (w[:, 0, 0] * x).sum() == 30.0 == collapsed[0, 0] * x


def test_collapse_zero():
    assert np.all(tr.collapse_patch_embed_channels(np.zeros((3, 16, 8))) == 0.0)


def test_collapse_equivalence_random():
    rng = np.random.default_rng(2)
    p, d = 4, 8
    w = rng.standard_normal((3 * p * p, d))
    collapsed = tr.collapse_flat_patch_embed(w, p)
    for _ in range(100):
        x = rng.random((1, p, p))
        rep = mae.patchify(np.repeat(x, 3, axis=0), p)
        one = mae.patchify(x, p)
        assert np.max(np.abs(rep @ w - one @ collapsed)) < 1e-12


def test_collapse_rejects_wrong_channel_axis():
    with pytest.raises(tc.ShapeError):
        tr.collapse_patch_embed_channels(np.zeros((2, 16, 8)))
    with pytest.raises(tc.ShapeError):
        tr.collapse_flat_patch_embed(np.zeros((32, 8)), 4)


def test_collapse_keeps_dtype():
    w = np.ones((3, 4, 2), dtype=np.float32)
    assert tr.collapse_patch_embed_channels(w).dtype == np.float32


def test_adapt_posenc_same_grid_identical():
    assert np.array_equal(tr.adapt_posenc((4, 4), (4, 4), 16), mae.sincos_posenc_2d(4, 4, 16))


def test_adapt_posenc_grid_size():
    assert tr.adapt_posenc((8, 8), (64 // 4, 64 // 4), 64).shape == (256, 64)


def test_adapt_posenc_shared_coordinates_agree():
    a = tr.adapt_posenc((8, 8), (8, 8), 16)
    b = tr.adapt_posenc((8, 8), (8, 16), 16)
    for r in range(8):
        for c in range(8):
            assert np.array_equal(a[r * 8 + c], b[r * 16 + c])


def test_adapt_encoder_report():
    cfg, enc, report = tr.adapt_encoder(source_checkpoint(), 1, 16, 16)
    assert cfg.grid == (4, 4) and cfg.channels == 1
    assert enc["enc.patch_embed.w"].shape == (16, SRC.dim)
    assert report.source_grid == (2, 2) and report.target_grid == (4, 4)
    assert report.params_before - report.params_after == 2 * 16 * SRC.dim
    assert not any(k.startswith("dec.") for k in enc)


def test_adapt_encoder_errors():
    with pytest.raises(tr.TransferError, match="patch size"):
        tr.adapt_encoder(source_checkpoint(), 1, 10, 16)
    one = mae.MaeConfig(channels=1, height=8, width=8, patch=4, dim=8, heads=2, decoder_dim=8, decoder_heads=2)
    with pytest.raises(tr.TransferError, match="channels"):
        tr.adapt_encoder(mae.Checkpoint(one, mae.init_params(one)), 3, 8, 8)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


def test_head_shape(tmp_path):
    model = tr.build_classifier(source_checkpoint(), write_task(tmp_path))
    assert model.params["head.w"].shape == (SRC.dim, 3)
    assert model.params["head.b"].shape == (3,)


def test_linear_probe_freezes_encoder(tmp_path):
    task = write_task(tmp_path, n_train=40)
    model = tr.build_classifier(source_checkpoint(), task, mode=tr.LINEAR_PROBE)
    before = {k: v.copy() for k, v in model.encoder_arrays().items()}
    head_before = model.params["head.w"].data.copy()
    tr.train_downstream(model, task, tr.DownstreamSchedule(epochs=2, batch_size=8))  # 10 steps
    assert all(model.encoder_arrays()[k].tobytes() == v.tobytes() for k, v in before.items())
    assert not np.array_equal(model.params["head.w"].data, head_before)


def test_fine_tune_changes_encoder(tmp_path):
    task = write_task(tmp_path)
    model = tr.build_classifier(source_checkpoint(), task, mode=tr.FINE_TUNE)
    before = {k: v.copy() for k, v in model.encoder_arrays().items()}
    tr.train_downstream(model, task, tr.DownstreamSchedule(epochs=1, batch_size=4))
    assert any(not np.array_equal(model.encoder_arrays()[k], v) for k, v in before.items())


def test_zero_lr_metric_constant(tmp_path):
    task = write_task(tmp_path)
    model = tr.build_classifier(source_checkpoint(), task)
    hist = tr.train_downstream(model, task, tr.DownstreamSchedule(epochs=3, lr=0.0))
    assert len({h["metric"] for h in hist}) == 1


def test_training_is_deterministic(tmp_path):
    task = write_task(tmp_path)
    runs = []
    for _ in range(2):
        model = tr.build_classifier(source_checkpoint(), task, seed=4)
        runs.append(tr.train_downstream(model, task, tr.DownstreamSchedule(epochs=2, batch_size=4, seed=4)))
    assert runs[0] == runs[1]


def test_training_learns_easy_task(tmp_path):
    task = write_task(tmp_path, n_train=30, n_test=12)
    model = tr.build_classifier(source_checkpoint(), task)
    hist = tr.train_downstream(model, task, tr.DownstreamSchedule(epochs=15, batch_size=6, lr=3e-3))
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    assert hist[-1]["metric"] >= 0.9


def test_multi_label_task_reports_map(tmp_path):
    task = write_task(tmp_path, kind="multi", fmt="pgm")
    model = tr.build_classifier(source_checkpoint(), task, mode=tr.LINEAR_PROBE)
    hist = tr.train_downstream(model, task, tr.DownstreamSchedule(epochs=1))
    assert 0.0 <= hist[0]["metric"] <= 1.0


def test_empty_train_set(tmp_path):
    task = write_task(tmp_path, n_train=3)
    task.train = []
    model = tr.build_classifier(source_checkpoint(), task)
    with pytest.raises(tr.TransferError, match="empty"):
        tr.train_downstream(model, task)


def test_random_init_differs_from_pretrained(tmp_path):
    task = write_task(tmp_path)
    a = tr.build_classifier(source_checkpoint(), task)
    b = tr.build_classifier(source_checkpoint(), task, random_init=True)
    assert not np.array_equal(a.params["enc.blocks.0.attn.q.w"].data, b.params["enc.blocks.0.attn.q.w"].data)


def test_classifier_checkpoint_roundtrip(tmp_path):
    task = write_task(tmp_path)
    model = tr.build_classifier(source_checkpoint(), task)
    path = str(tmp_path / "clf.spma")
    mae.save_checkpoint(path, model.to_checkpoint())
    loaded = tr.classifier_from_checkpoint(mae.load_checkpoint(path))
    x, _ = task.load("test")
    assert np.array_equal(tr.predict(model, x), tr.predict(loaded, x))


def test_unknown_mode_or_pooling(tmp_path):
    task = write_task(tmp_path)
    with pytest.raises(tr.TransferError):
        tr.build_classifier(source_checkpoint(), task, mode="distill")
    with pytest.raises(tr.TransferError):
        tr.build_classifier(source_checkpoint(), task, pooling="cls")


def test_task_label_range(tmp_path):
    task = write_task(tmp_path)
    task.train[0]["label"] = 7
    with pytest.raises(tr.TransferError):
        task.load("train")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_accuracy_cases():
    assert tr.accuracy(np.eye(3), [0, 1, 2]) == 1.0
    assert tr.accuracy(np.array([[1, 0], [1, 0], [0, 1], [0, 1]]), [0, 1, 0, 1]) == 0.5


def test_accuracy_ties_go_to_lowest_index():
    assert tr.accuracy(np.array([[0.5, 0.5]]), [0]) == 1.0


def test_accuracy_matches_counting_oracle(rng):
    scores = rng.standard_normal((100, 4))
    labels = rng.integers(0, 4, 100)
    hits = 0
    for s, y in zip(scores, labels):
        best = 0
        for k in range(4):
            if s[k] > s[best]:
                best = k
        hits += best == y
    assert tr.accuracy(scores, labels) == hits / 100


@given(st.integers(0, 2 ** 31), st.floats(-100, 100))
def test_accuracy_shift_invariance(seed, shift):
    r = np.random.default_rng(seed)
    scores = r.integers(-5, 5, (20, 3)).astype(np.float64)
    labels = r.integers(0, 3, 20)
    shifted = scores + r.integers(-50, 50, (20, 1))
    assert tr.accuracy(scores, labels) == tr.accuracy(shifted, labels)


def test_accuracy_length_mismatch():
    with pytest.raises(ValueError):
        tr.accuracy(np.eye(3), [0, 1])


def test_map_perfect_and_hand_case():
    labels = np.array([[1, 0], [0, 1], [1, 0]])
    assert tr.mean_average_precision(labels.astype(float), labels) == 1.0
    ap = tr.mean_average_precision(np.array([[0.9], [0.8], [0.1]]), np.array([[1], [0], [1]]))
    assert ap == pytest.approx(5 / 6, abs=1e-15)


@pytest.mark.parametrize("n", [1, 2, 5, 10])
def test_map_single_positive_last(n):
    scores = np.arange(n, 0, -1, dtype=float)[:, None]
    labels = np.zeros((n, 1))
    labels[-1] = 1
    assert tr.mean_average_precision(scores, labels) == pytest.approx(1 / n)


def test_map_ties_by_index():
    scores = np.zeros((3, 1))
    assert tr.mean_average_precision(scores, np.array([[0], [0], [1]])) == pytest.approx(1 / 3)
    assert tr.mean_average_precision(scores, np.array([[1], [0], [0]])) == 1.0


def test_map_skips_classes_without_positives():
    scores = np.array([[0.9, 0.1], [0.2, 0.3]])
    labels = np.array([[1, 0], [0, 0]])
    assert tr.mean_average_precision(scores, labels) == 1.0
    with pytest.raises(ValueError):
        tr.mean_average_precision(scores, np.zeros((2, 2)))


@given(st.integers(0, 2 ** 31))
def test_map_range_and_monotone_invariance(seed):
    r = np.random.default_rng(seed)
    scores = r.random((12, 4))
    labels = (r.random((12, 4)) < 0.4).astype(int)
    labels[0] = 1
    m = tr.mean_average_precision(scores, labels)
    assert 0.0 <= m <= 1.0
    assert tr.mean_average_precision(2 * scores + 1, labels) == m
