"""Moving a pre-trained MAE encoder onto a new input shape and training a classifier on top.

Two adaptations make an RGB checkpoint accept 1-channel spectrograms of a
different size: the patch embedding is summed over its channel axis, and the
sin-cos positional encoding is regenerated for the new token grid.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import mae
from . import tensorcore as tc
from .imageio import read_pnm
from .seeding import make_rng

FINE_TUNE = "fine-tune"
LINEAR_PROBE = "linear-probe"


class TransferError(ValueError):
    pass


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------


def collapse_patch_embed_channels(weight):
    """Sum a (3, P*P, D) patch-embedding weight over its channel axis -> (P*P, D).

    Feeding a 1-channel patch x to the result equals feeding the 3-channel
    replicate [x, x, x] to the original. The sum runs in float64 in channel
    order (c0 + c1) + c2 and is rounded once to the input dtype.
    """
    w = np.asarray(weight)
    if w.ndim != 3 or w.shape[0] != 3:
        raise tc.ShapeError(f"expected a (3, P*P, D) patch-embedding weight, got {w.shape}")
    w64 = w.astype(np.float64)
    return ((w64[0] + w64[1]) + w64[2]).astype(w.dtype)


def collapse_flat_patch_embed(weight, patch):
    """Same as :func:`collapse_patch_embed_channels` for the flat (3*P*P, D) layout used by the model."""
    w = np.asarray(weight)
    if w.ndim != 2 or w.shape[0] != 3 * patch * patch:
        raise tc.ShapeError(f"patch-embedding weight {w.shape} has no 3-channel input axis for P={patch}")
    return collapse_patch_embed_channels(w.reshape(3, patch * patch, w.shape[1]))


def adapt_posenc(src_grid, dst_grid, dim):
    """Positional encoding for ``dst_grid``; sin-cos encodings depend only on (row, col), so this regenerates."""
    del src_grid  # nothing is interpolated from the source
    return mae.sincos_posenc_2d(dst_grid[0], dst_grid[1], dim)


@dataclass
class AdapterReport:
    source_grid: tuple
    target_grid: tuple
    source_channels: int
    target_channels: int
    params_before: int
    params_after: int


def adapt_encoder(ckpt, channels, height, width):
    """Encoder weights and config for a new input shape, plus what changed."""
    cfg = ckpt.config
    if height % cfg.patch or width % cfg.patch:
        raise TransferError(f"input {height}x{width} is not divisible by the checkpoint patch size {cfg.patch}")
    enc = {k: np.array(v) for k, v in ckpt.params.items() if k.startswith("enc.")}
    before = sum(v.size for v in enc.values())
    if channels != cfg.channels:
        if cfg.channels == 3 and channels == 1:
            enc["enc.patch_embed.w"] = collapse_flat_patch_embed(enc["enc.patch_embed.w"], cfg.patch)
        else:
            raise TransferError(f"cannot adapt a {cfg.channels}-channel encoder to {channels} channels")
    new_cfg = replace(cfg, channels=channels, height=height, width=width)
    report = AdapterReport(cfg.grid, new_cfg.grid, cfg.channels, channels, before,
                           sum(v.size for v in enc.values()))
    return new_cfg, enc, report


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


@dataclass
class DownstreamTask:
    classes: list
    label_kind: str
    train: list
    test: list
    root: str = "."

    @property
    def num_classes(self):
        return len(self.classes)

    def load(self, split):
        """(samples (n, C, H, W) float32, labels) for ``split``."""
        entries = self.train if split == "train" else self.test
        xs, ys = [], []
        for e in entries:
            xs.append(load_sample(os.path.join(self.root, e["path"])))
            if self.label_kind == "single":
                ys.append(int(e["label"]))
            else:
                ys.append(np.asarray(e["labels"], dtype=np.float32))
        if not xs:
            return np.zeros((0,)), np.zeros((0,))
        labels = np.asarray(ys, dtype=np.int64 if self.label_kind == "single" else np.float32)
        if self.label_kind == "single" and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise TransferError(f"{split} labels fall outside [0, {self.num_classes})")
        return np.stack(xs).astype(np.float32), labels

    def sample_shape(self):
        entries = self.train or self.test
        return load_sample(os.path.join(self.root, entries[0]["path"])).shape


def load_sample(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing task sample: {path}")
    if path.endswith((".ppm", ".pgm")):
        return read_pnm(path)
    tensors = tc.load_tensors(path)
    if len(tensors) != 1:
        raise tc.FormatError(f"{path}: expected a single-tensor file, found {len(tensors)} tensors")
    arr = next(iter(tensors.values()))
    return arr if arr.ndim == 3 else arr[None]


def load_task(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("label_kind", "single")
    if kind not in ("single", "multi"):
        raise TransferError(f"{path}: label_kind must be 'single' or 'multi', got {kind!r}")
    return DownstreamTask(doc["classes"], kind, doc.get("train", []), doc.get("test", []),
                          os.path.dirname(os.path.abspath(path)))


def write_task(path, task):
    doc = {"classes": list(task.classes), "label_kind": task.label_kind, "train": task.train, "test": task.test}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


@dataclass
class Classifier:
    config: mae.MaeConfig
    params: dict  # name -> Tensor
    num_classes: int
    label_kind: str
    mode: str
    adapter: AdapterReport | None = None
    history: list = field(default_factory=list)

    def trainable(self):
        if self.mode == LINEAR_PROBE:
            return {k: v for k, v in self.params.items() if k.startswith("head.")}
        return dict(self.params)

    def encoder_arrays(self):
        return {k: v.data for k, v in self.params.items() if k.startswith("enc.")}

    def to_checkpoint(self):
        arrays = {k: v.data.astype(np.float32) for k, v in self.params.items()}
        extra = {"mode": self.mode, "num_classes": self.num_classes, "label_kind": self.label_kind}
        return mae.Checkpoint(self.config, arrays, 0, "classifier", extra)


def build_classifier(ckpt, task, mode=FINE_TUNE, pooling="mean", seed=0, dtype=np.float32, random_init=False):
    """Encoder (adapted to the task's sample shape) + mean pooling + linear head.

    ``random_init`` keeps the architecture but discards the checkpoint weights,
    giving the from-scratch baseline.
    """
    if mode not in (FINE_TUNE, LINEAR_PROBE):
        raise TransferError(f"unknown mode {mode!r}")
    if pooling != "mean":
        raise TransferError("only mean pooling is supported")
    c, h, w = task.sample_shape()
    cfg, enc, report = adapt_encoder(ckpt, c, h, w)
    if random_init:
        enc = mae.init_encoder(cfg, make_rng(seed + 7), dtype)
    rng = make_rng(seed)
    arrays = {k: np.asarray(v, dtype=dtype) for k, v in enc.items()}
    arrays["head.w"] = (0.01 * rng.standard_normal((cfg.dim, task.num_classes))).astype(dtype)
    arrays["head.b"] = np.zeros(task.num_classes, dtype=dtype)
    return Classifier(cfg, mae.as_parameters(arrays), task.num_classes, task.label_kind, mode, report)


def classifier_from_checkpoint(ckpt):
    extra = ckpt.extra
    return Classifier(ckpt.config, mae.as_parameters({k: np.array(v) for k, v in ckpt.params.items()}),
                      int(extra["num_classes"]), extra.get("label_kind", "single"), extra.get("mode", FINE_TUNE))


def pooled_features(model, samples):
    """Mean over encoder output tokens, (B, D)."""
    cfg = model.config
    patches = mae.patchify(samples, cfg.patch).astype(model.params["head.w"].dtype)
    posenc = mae.sincos_posenc_2d(*cfg.grid, cfg.dim)
    tokens = mae.encode_tokens(patches, model.params, cfg, posenc)
    b, n, d = tokens.shape
    avg = tc.Tensor(np.full((b, 1, n), 1.0 / n, dtype=tokens.dtype))
    return tc.reshape(tc.matmul(avg, tokens), (b, d))


def head(model, features):
    return tc.add_bias(tc.matmul(features, model.params["head.w"]), model.params["head.b"])


def predict(model, samples, batch_size=64):
    outs = []
    with tc.no_grad():
        for i in range(0, len(samples), batch_size):
            outs.append(head(model, pooled_features(model, samples[i:i + batch_size])).data)
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes))


def task_loss(model, logits, labels):
    if model.label_kind == "single":
        return tc.softmax_cross_entropy(logits, labels)
    return tc.sigmoid_binary_cross_entropy(logits, labels)


def evaluate(model, samples, labels):
    scores = predict(model, samples)
    if model.label_kind == "single":
        return accuracy(scores, labels)
    return mean_average_precision(scores, labels)


@dataclass
class DownstreamSchedule:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    seed: int = 0


def _epoch_lr(schedule, step, total_steps, steps_per_epoch):
    warm = schedule.warmup_epochs * steps_per_epoch
    if step < warm:
        return schedule.lr * (step + 1) / warm
    return schedule.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / max(1, total_steps - warm)))


def train_downstream(model, task, schedule=DownstreamSchedule(), log=None):
    """Train the classifier; returns ``model.history`` (epoch, train_loss, metric per epoch)."""
    x_train, y_train = task.load("train")
    if len(x_train) == 0:
        raise TransferError("empty training set")
    x_test, y_test = task.load("test")
    dtype = model.params["head.w"].dtype
    trainable = model.trainable()
    state = tc.OptimizerState(lr=schedule.lr, weight_decay=schedule.weight_decay,
                              no_decay=mae.no_decay_names(trainable))
    rng = make_rng(schedule.seed)
    frozen_features = None
    if model.mode == LINEAR_PROBE:
        # the encoder is fixed, so its pooled features are computed once
        with tc.no_grad():
            frozen_features = np.concatenate([pooled_features(model, x_train[i:i + 64]).data
                                              for i in range(0, len(x_train), 64)])
    n = len(x_train)
    steps_per_epoch = math.ceil(n / schedule.batch_size)
    total = steps_per_epoch * schedule.epochs
    step = 0
    model.history = []
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            if frozen_features is not None:
                feats = tc.Tensor(frozen_features[idx])
            else:
                feats = pooled_features(model, x_train[idx].astype(dtype))
            loss = task_loss(model, head(model, feats), y_train[idx])
            tc.zero_grad(model.params)
            grads = tc.backward(loss)
            tc.optimizer_step(state, trainable, grads, lr=_epoch_lr(schedule, step, total, steps_per_epoch))
            losses.append(float(loss.data))
            step += 1
        metric = evaluate(model, x_test, y_test) if len(x_test) else float("nan")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "metric": metric}
        model.history.append(row)
        if log is not None:
            log(row)
    return model.history


def write_metric_csv(path, history, metric_name):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"epoch,train_loss,{metric_name}\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']:.9g},{row['metric']:.9g}\n")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def accuracy(predictions, labels):
    """Argmax match rate; ties resolve to the lowest class index."""
    scores = np.asarray(predictions)
    labels = np.asarray(labels)
    if scores.shape[0] != labels.shape[0]:
        raise ValueError(f"{scores.shape[0]} predictions vs {labels.shape[0]} labels")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def average_precision(scores, labels):
    """AP for one class: mean over positive ranks k of precision@k.

    Samples are ranked by descending score, ties by ascending sample index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def mean_average_precision(scores, binary_labels):
    """Mean AP over classes that have at least one positive; other classes are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(binary_labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal (n, K) arrays")
    aps = [average_precision(scores[:, k], labels[:, k]) for k in range(labels.shape[1]) if labels[:, k].any()]
    if not aps:
        raise ValueError("no class has a positive label")
    return float(np.mean(aps))
