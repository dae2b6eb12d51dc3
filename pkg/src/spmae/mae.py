"""Masked autoencoder: model, masking, loss and the pre-training loop."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensorcore as tc
from .imageio import read_pnm
from .seeding import make_rng


@dataclass(frozen=True)
class MaeConfig:
    channels: int = 3
    height: int = 32
    width: int = 32
    patch: int = 4
    dim: int = 64
    depth: int = 2
    heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 1
    decoder_heads: int = 2
    mask_ratio: float = 0.75
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        p = self.patch
        if p < 1 or self.height % p or self.width % p:
            raise tc.ShapeError(f"image {self.height}x{self.width} is not divisible into {p}x{p} patches")
        for name, d, h in (("dim", self.dim, self.heads), ("decoder_dim", self.decoder_dim, self.decoder_heads)):
            if h < 1 or d % (2 * h) or d % 4:
                raise tc.ShapeError(f"{name}={d} must be divisible by 4 and by 2*heads={2 * h}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must lie in (0, 1), got {self.mask_ratio}")

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# patches, positions, masks
# ---------------------------------------------------------------------------


def patchify(img, patch):
    """(..., C, H, W) -> (..., N, P*P*C); row k is patch (k // (W/P), k % (W/P)), channel-major."""
    img = np.asarray(img)
    *lead, c, h, w = img.shape
    if h % patch or w % patch:
        raise tc.ShapeError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    x = img.reshape(*lead, c, gh, patch, gw, patch)
    nl = len(lead)
    x = np.moveaxis(x, (nl + 1, nl + 3), (nl, nl + 1))  # (..., gh, gw, c, p, p)
    return x.reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(patches, patch, channels, height, width):
    patches = np.asarray(patches)
    *lead, n, d = patches.shape
    gh, gw = height // patch, width // patch
    if n != gh * gw or d != channels * patch * patch:
        raise tc.ShapeError(f"patch tensor {patches.shape} does not match {channels}x{height}x{width}/P={patch}")
    x = patches.reshape(*lead, gh, gw, channels, patch, patch)
    nl = len(lead)
    x = np.moveaxis(x, (nl, nl + 1), (nl + 1, nl + 3))
    return x.reshape(*lead, channels, height, width)


def sincos_1d(positions, dim):
    """Interleaved [sin(p w_0), cos(p w_0), sin(p w_1), ...] with w_j = 10000^(-2j/dim)."""
    omega = 1.0 / 10000.0 ** (2.0 * np.arange(dim // 2) / dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * omega[None, :]
    out = np.empty((angles.shape[0], dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sincos_posenc_2d(grid_h, grid_w, dim):
    """(grid_h * grid_w, dim): first half encodes the row, second half the column."""
    if dim % 4:
        raise tc.ShapeError(f"positional encoding dim must be divisible by 4, got {dim}")
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.concatenate([sincos_1d(rows, dim // 2), sincos_1d(cols, dim // 2)], axis=1)


@dataclass
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray


def num_masked(n, ratio):
    # tolerance keeps e.g. 0.29 * 100 from flooring to 28
    return int(math.floor(ratio * n + 1e-9))


def sample_mask(n, ratio, rng):
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n < 2:
        raise ValueError("need at least 2 patches to mask")
    masked = num_masked(n, ratio)
    if masked == 0 or masked == n:
        raise ValueError(f"mask ratio {ratio} leaves {n - masked} of {n} patches visible")
    perm = rng.permutation(n)
    keep = n - masked
    return MaskPlan(perm[:keep], perm[keep:])


def sample_masks(batch, n, ratio, rng):
    """Independent mask per sample; returns (visible (B, nv), masked (B, nm))."""
    plans = [sample_mask(n, ratio, rng) for _ in range(batch)]
    return np.stack([p.visible for p in plans]), np.stack([p.masked for p in plans])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _xavier(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


def _linear(params, prefix, rng, fan_in, fan_out, dtype):
    params[f"{prefix}.w"] = _xavier(rng, fan_in, fan_out, dtype)
    params[f"{prefix}.b"] = np.zeros(fan_out, dtype=dtype)


def _norm(params, prefix, dim, dtype):
    params[f"{prefix}.g"] = np.ones(dim, dtype=dtype)
    params[f"{prefix}.b"] = np.zeros(dim, dtype=dtype)


def _block_params(params, prefix, rng, dim, mlp_ratio, dtype):
    _norm(params, f"{prefix}.ln1", dim, dtype)
    for proj in ("q", "k", "v", "proj"):
        _linear(params, f"{prefix}.attn.{proj}", rng, dim, dim, dtype)
    _norm(params, f"{prefix}.ln2", dim, dtype)
    _linear(params, f"{prefix}.mlp.fc1", rng, dim, dim * mlp_ratio, dtype)
    _linear(params, f"{prefix}.mlp.fc2", rng, dim * mlp_ratio, dim, dtype)


def init_encoder(config, rng, dtype=np.float32):
    params = {}
    _linear(params, "enc.patch_embed", rng, config.patch_dim, config.dim, dtype)
    for i in range(config.depth):
        _block_params(params, f"enc.blocks.{i}", rng, config.dim, config.mlp_ratio, dtype)
    _norm(params, "enc.norm", config.dim, dtype)
    return params


def init_params(config, dtype=np.float32):
    """Fresh MAE weights (numpy arrays keyed by name) from ``config.seed``."""
    rng = make_rng(config.seed)
    params = init_encoder(config, rng, dtype)
    _linear(params, "dec.embed", rng, config.dim, config.decoder_dim, dtype)
    params["dec.mask_token"] = (0.02 * rng.standard_normal(config.decoder_dim)).astype(dtype)
    for i in range(config.decoder_depth):
        _block_params(params, f"dec.blocks.{i}", rng, config.decoder_dim, config.mlp_ratio, dtype)
    _norm(params, "dec.norm", config.decoder_dim, dtype)
    _linear(params, "dec.head", rng, config.decoder_dim, config.patch_dim, dtype)
    return params


def as_parameters(arrays):
    return {k: tc.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def no_decay_names(names):
    """Biases, norm scales/shifts and the mask token are excluded from weight decay."""
    return frozenset(n for n in names if n.endswith((".b", ".g", "mask_token")))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def linear(x, params, prefix):
    return tc.add_bias(tc.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def norm(x, params, prefix):
    return tc.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _split_heads(x, heads):
    b, n, d = x.shape
    return tc.transpose(tc.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def transformer_block(x, params, prefix, heads):
    """Pre-norm block: x + attn(ln(x)), then + mlp(ln(x))."""
    b, n, d = x.shape
    h = norm(x, params, f"{prefix}.ln1")
    q = _split_heads(linear(h, params, f"{prefix}.attn.q"), heads)
    k = _split_heads(linear(h, params, f"{prefix}.attn.k"), heads)
    v = _split_heads(linear(h, params, f"{prefix}.attn.v"), heads)
    a = tc.reshape(tc.transpose(tc.attention(q, k, v), (0, 2, 1, 3)), (b, n, d))
    x = tc.add(x, linear(a, params, f"{prefix}.attn.proj"))
    h = norm(x, params, f"{prefix}.ln2")
    h = linear(tc.gelu(linear(h, params, f"{prefix}.mlp.fc1")), params, f"{prefix}.mlp.fc2")
    return tc.add(x, h)


def _as_batch(x):
    t = tc.as_tensor(x)
    return (t, False) if t.data.ndim == 3 else (tc.reshape(t, (1,) + t.shape), True)


def encode_tokens(patches, params, config, posenc, index=None):
    """Embed patches, add positions and run the encoder stack.

    ``patches`` is (B, N, P*P*C); ``index`` (B, k) optionally selects which
    patches are encoded, each keeping the positional encoding of its original
    index.
    """
    x = tc.as_tensor(patches)
    pos = np.broadcast_to(posenc.astype(x.dtype), (x.shape[0],) + posenc.shape)
    if index is not None:
        x = tc.gather_rows(x, index)
        pos = np.take_along_axis(pos, np.asarray(index)[..., None], axis=1)
    x = tc.add(linear(x, params, "enc.patch_embed"), tc.Tensor(np.ascontiguousarray(pos)))
    for i in range(config.depth):
        x = transformer_block(x, params, f"enc.blocks.{i}", config.heads)
    return norm(x, params, "enc.norm")


def encode_visible(patches, mask, params, config):
    """Latents for the visible patches: (B, nv, D), or (nv, D) for a single sample."""
    x, single = _as_batch(patches)
    visible = np.asarray(mask.visible if isinstance(mask, MaskPlan) else mask)
    if single:
        visible = visible[None]
    if x.shape[1:] != (config.num_patches, config.patch_dim):
        raise tc.ShapeError(f"encode_visible: patches {x.shape[1:]} do not match config "
                            f"({config.num_patches}, {config.patch_dim})")
    posenc = sincos_posenc_2d(*config.grid, config.dim)
    out = encode_tokens(x, params, config, posenc, visible)
    return tc.reshape(out, out.shape[1:]) if single else out


def decode_and_reconstruct(latent, visible, masked, params, config):
    """Predicted patches (B, N, P*P*C) from visible latents and the mask partition."""
    z, single = _as_batch(latent)
    visible = np.asarray(visible)
    masked = np.asarray(masked)
    if single:
        visible, masked = visible[None], masked[None]
    b, nv, _ = z.shape
    n = config.num_patches
    if visible.shape != (b, nv) or masked.shape[0] != b or nv + masked.shape[1] != n:
        raise tc.ShapeError(f"decode: mask ({visible.shape}, {masked.shape}) does not match latent {z.shape}")
    dd = config.decoder_dim
    y = tc.scatter_rows(linear(z, params, "dec.embed"), visible, n)
    tokens = tc.add_bias(tc.Tensor(np.zeros((b, masked.shape[1], dd), dtype=z.dtype)), params["dec.mask_token"])
    y = tc.add(y, tc.scatter_rows(tokens, masked, n))
    pos = sincos_posenc_2d(*config.grid, dd).astype(z.dtype)
    y = tc.add_bias(y, tc.Tensor(pos))
    for i in range(config.decoder_depth):
        y = transformer_block(y, params, f"dec.blocks.{i}", config.decoder_heads)
    y = linear(norm(y, params, "dec.norm"), params, "dec.head")
    return tc.reshape(y, y.shape[1:]) if single else y


def masked_row_mask(masked, n):
    masked = np.asarray(masked)
    rows = np.zeros(masked.shape[:-1] + (n,), dtype=bool)
    np.put_along_axis(rows, masked, True, axis=-1)
    return rows


def mae_loss(reconstruction, target_patches, masked):
    """MSE over masked patches only, averaged over the batch."""
    rec = tc.as_tensor(reconstruction)
    return tc.masked_mse(rec, np.asarray(target_patches, dtype=rec.dtype),
                         masked_row_mask(masked, rec.shape[-2]))


def forward_loss(params, config, images, visible, masked):
    target = patchify(images, config.patch)
    latent = encode_visible(target, visible, params, config)
    rec = decode_and_reconstruct(latent, visible, masked, params, config)
    return mae_loss(rec, target, masked)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: MaeConfig
    params: dict
    step: int = 0
    kind: str = "mae"
    extra: dict = field(default_factory=dict)


def _meta_tensor(meta):
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def save_checkpoint(path, ckpt):
    meta = {"kind": ckpt.kind, "step": int(ckpt.step), "config": ckpt.config.to_dict(), "extra": ckpt.extra}
    tensors = {"meta.json": _meta_tensor(meta)}
    tensors.update(ckpt.params)
    tc.save_tensors(path, tensors)


def expected_names(config, kind="mae"):
    names = set(init_encoder(config, make_rng(0)).keys())
    if kind == "mae":
        names = set(init_params(config).keys())
    return names


def load_checkpoint(path):
    tensors = tc.load_tensors(path)
    if "meta.json" not in tensors:
        raise tc.FormatError(f"{path}: missing checkpoint metadata")
    meta = json.loads(tensors.pop("meta.json").astype(np.uint8).tobytes().decode("utf-8"))
    config = MaeConfig.from_dict(meta["config"])
    ckpt = Checkpoint(config, tensors, meta.get("step", 0), meta.get("kind", "mae"), meta.get("extra", {}))
    missing = expected_names(config, "mae" if ckpt.kind == "mae" else "encoder") - set(tensors)
    if missing:
        raise tc.FormatError(f"{path}: checkpoint lacks parameters {sorted(missing)[:5]}")
    return ckpt


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    steps: int = 300
    batch_size: int = 32
    base_lr: float = 1e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95


def learning_rate(schedule, step):
    """Linear warmup over the first warmup_frac of steps, then cosine decay to 0."""
    total = schedule.steps
    warm = max(1, int(round(schedule.warmup_frac * total)))
    if step < warm:
        return schedule.base_lr * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def load_images(manifest):
    imgs = []
    for path in manifest.paths():
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing dataset image: {path}")
        imgs.append(read_pnm(path))
    return np.stack(imgs)


class BatchSampler:
    """Epoch-wise shuffled batches; epochs are concatenated, so batches never run short."""

    def __init__(self, n, batch_size, rng):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = np.empty(0, dtype=np.int64)

    def next(self):
        while self.order.size < self.batch_size:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        batch, self.order = self.order[:self.batch_size], self.order[self.batch_size:]
        return batch


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    losses: list


def pretrain(config, images, schedule, dtype=np.float32, log=None):
    """Train an MAE on ``images`` (n, C, H, W) or a DatasetManifest."""
    if not isinstance(images, np.ndarray):
        m = images
        if (m.channels, m.height, m.width) != (config.channels, config.height, config.width):
            raise tc.ShapeError(f"dataset images are {m.channels}x{m.height}x{m.width}, config expects "
                                f"{config.channels}x{config.height}x{config.width}")
        images = load_images(m)
    if images.ndim != 4 or images.shape[1:] != (config.channels, config.height, config.width):
        raise tc.ShapeError(f"dataset images {images.shape[1:]} do not match config "
                            f"{(config.channels, config.height, config.width)}")
    images = images.astype(dtype)
    params = as_parameters(init_params(config, dtype))
    state = tc.OptimizerState(lr=schedule.base_lr, beta1=schedule.beta1, beta2=schedule.beta2,
                              weight_decay=schedule.weight_decay, no_decay=no_decay_names(params))
    rng = make_rng(config.seed + 1)
    sampler = BatchSampler(len(images), schedule.batch_size, rng)
    losses = []
    for step in range(schedule.steps):
        batch = images[sampler.next()]
        visible, masked = sample_masks(len(batch), config.num_patches, config.mask_ratio, rng)
        loss = forward_loss(params, config, batch, visible, masked)
        tc.zero_grad(params)
        grads = tc.backward(loss)
        tc.optimizer_step(state, params, grads, lr=learning_rate(schedule, step))
        losses.append(float(loss.data))
        if log is not None:
            log(step, losses[-1])
    arrays = {k: p.data.astype(np.float32) for k, p in params.items()}
    return PretrainResult(Checkpoint(config, arrays, schedule.steps), losses)


def write_loss_csv(path, losses):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v:.9g}\n")
