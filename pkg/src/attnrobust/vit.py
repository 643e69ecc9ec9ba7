"""A small Vision Transformer built on :mod:`attnrobust.attention`.

Pipeline: patchify -> linear patch embedding -> prepend class token -> add
positional table -> ``depth`` pre-norm encoder blocks -> final LayerNorm ->
class-token (or mean-pooled) readout -> linear classifier.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, init_multi_head_params, multi_head, trunc_normal
from .errors import ConfigError, DataError, DimensionError
from .optim import AdamW, CosineSchedule
from .rng import make_rng
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    pool: str = "cls"
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.pool not in ("cls", "mean"):
            raise ConfigError(f"pool must be 'cls' or 'mean', got {self.pool!r}")
        if self.num_classes < 1 or self.depth < 1:
            raise ConfigError("num_classes and depth must be positive")
        attn = dataclasses.replace(self.attention, heads=self.heads, head_dim=self.embed_dim // self.heads)
        object.__setattr__(self, "attention", attn.resolve(self.seq_len))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ViTConfig":
        d = dict(d)
        attn = d.pop("attention", {}) or {}
        return cls(attention=AttentionConfig(**attn), **d)


def patchify(image, patch_size: int) -> Tensor:
    """Split ``(C, H, W)`` or ``(B, C, H, W)`` images into flattened patches.

    Patches are listed in raster order (left to right, then top to bottom).
    Each row flattens one patch channel-major, then by pixel row, then by
    pixel column, giving ``(..., n, C * p * p)``.

    Raises:
        DimensionError: if H or W is not a multiple of ``patch_size``.
    """
    x = T.as_tensor(image)
    if x.ndim not in (3, 4):
        raise DimensionError(f"patchify expects (C,H,W) or (B,C,H,W), got {x.shape}")
    batched = x.ndim == 4
    if not batched:
        x = x.reshape(1, *x.shape)
    B, C, H, W = x.shape
    p = patch_size
    if H % p or W % p:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    out = x.reshape(B, C, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, C * p * p)
    return out if batched else out.reshape(gh * gw, C * p * p)


def unpatchify(patches: np.ndarray, channels: int, height: int, width: int, patch_size: int) -> np.ndarray:
    """Inverse of :func:`patchify` for a single image (array in, array out)."""
    p = patch_size
    gh, gw = height // p, width // p
    return (
        np.asarray(patches)
        .reshape(gh, gw, channels, p, p)
        .transpose(2, 0, 3, 1, 4)
        .reshape(channels, height, width)
    )


class ViTModel:
    """Parameters plus forward pass of the Vision Transformer.

    ``params`` maps dotted names to leaf tensors in a fixed insertion order;
    that order defines checkpoint layout and parameter hashing.
    """

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0, std: float = 0.02) -> "ViTModel":
        """Truncated-normal projections, zero biases and classifier, unit norms."""
        rng = make_rng(seed, "init")
        dtype = np.dtype(config.dtype)
        D = config.embed_dim

        def leaf(name, arr):
            return name, Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

        items = [
            leaf("patch_embed.weight", trunc_normal(rng, (config.patch_dim, D), std)),
            leaf("patch_embed.bias", np.zeros(D)),
            leaf("cls_token", trunc_normal(rng, (1, 1, D), std)),
            leaf("pos_embed", trunc_normal(rng, (1, config.seq_len, D), std)),
        ]
        for i in range(config.depth):
            pre = f"blocks.{i}."
            items += [leaf(pre + "norm1.weight", np.ones(D)), leaf(pre + "norm1.bias", np.zeros(D))]
            attn = init_multi_head_params(config.attention, rng, dtype, std)
            items += [leaf(pre + "attn." + k, t.data) for k, t in attn.items()]
            items += [
                leaf(pre + "norm2.weight", np.ones(D)),
                leaf(pre + "norm2.bias", np.zeros(D)),
                leaf(pre + "mlp.fc1.weight", trunc_normal(rng, (D, config.mlp_dim), std)),
                leaf(pre + "mlp.fc1.bias", np.zeros(config.mlp_dim)),
                leaf(pre + "mlp.fc2.weight", trunc_normal(rng, (config.mlp_dim, D), std)),
                leaf(pre + "mlp.fc2.bias", np.zeros(D)),
            ]
        items += [
            leaf("norm.weight", np.ones(D)),
            leaf("norm.bias", np.zeros(D)),
            leaf("head.weight", np.zeros((D, config.num_classes))),
            leaf("head.bias", np.zeros(config.num_classes)),
        ]
        return cls(config, dict(items))

    # -- forward -------------------------------------------------------
    def __call__(self, images) -> Tensor:
        return self.forward(images)

    def forward(self, images) -> Tensor:
        """Logits ``(B, num_classes)`` for ``(B, C, H, W)`` input, or
        ``(num_classes,)`` for a single ``(C, H, W)`` image.

        Raises:
            DimensionError: if the image size or channel count differs from
                the configuration.
        """
        cfg = self.config
        x = T.as_tensor(images, dtype=np.dtype(cfg.dtype)) if not isinstance(images, Tensor) else images
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"expected images of shape (B, {expected}), got {x.shape}")
        P = self.params
        B = x.shape[0]
        tokens = T.matmul(patchify(x, cfg.patch_size), P["patch_embed.weight"]) + P["patch_embed.bias"]
        cls = P["cls_token"].broadcast_to((B, 1, cfg.embed_dim))
        h = T.concat([cls, tokens], axis=1) + P["pos_embed"]
        for i in range(cfg.depth):
            h = self._block(h, f"blocks.{i}.")
        h = T.layer_norm(h, P["norm.weight"], P["norm.bias"])
        feat = h[:, 0] if cfg.pool == "cls" else h[:, 1:].mean(axis=1)
        logits = T.matmul(feat, P["head.weight"]) + P["head.bias"]
        return logits.reshape(cfg.num_classes) if single else logits

    def _block(self, h: Tensor, pre: str) -> Tensor:
        P = self.params
        a = T.layer_norm(h, P[pre + "norm1.weight"], P[pre + "norm1.bias"])
        attn = {k[len(pre) + 5 :]: v for k, v in P.items() if k.startswith(pre + "attn.")}
        h = h + multi_head(a, attn, self.config.attention)
        z = T.layer_norm(h, P[pre + "norm2.weight"], P[pre + "norm2.bias"])
        z = T.gelu(T.matmul(z, P[pre + "mlp.fc1.weight"]) + P[pre + "mlp.fc1.bias"])
        return h + T.matmul(z, P[pre + "mlp.fc2.weight"]) + P[pre + "mlp.fc2.bias"]

    # -- bookkeeping ---------------------------------------------------
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def no_decay_names(self) -> frozenset[str]:
        return frozenset(
            k for k, p in self.params.items()
            if p.ndim <= 1 or k in ("cls_token", "pos_embed")
        )

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(str(p.dtype).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.params.values())


def forward(model: ViTModel, image) -> Tensor:
    return model.forward(image)


def make_optimizer(
    model: ViTModel,
    lr: float = 1e-3,
    total_steps: int = 1,
    warmup_steps: int = 0,
    weight_decay: float = 0.05,
    min_lr: float = 0.0,
    grad_clip: float | None = 1.0,
) -> AdamW:
    schedule = CosineSchedule(lr, total_steps, warmup_steps, min_lr)
    return AdamW(
        model.params,
        schedule,
        weight_decay=weight_decay,
        no_decay=model.no_decay_names(),
        grad_clip=grad_clip,
    )


def train_step(model: ViTModel, batch: tuple[np.ndarray, np.ndarray], optimizer: AdamW) -> tuple[float, AdamW]:
    """One cross-entropy step on ``(images, labels)``; returns ``(loss, optimizer)``.

    Raises:
        DataError: for an empty batch or labels outside ``[0, num_classes)``.
    """
    images, labels = batch
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("empty batch")
    if labels.min() < 0 or labels.max() >= model.config.num_classes:
        raise DataError(f"labels must lie in [0, {model.config.num_classes}), got range [{labels.min()}, {labels.max()}]")
    optimizer.zero_grad()
    loss = T.cross_entropy(model.forward(images), labels)
    T.backward(loss)
    value = loss.item()
    if np.isfinite(value):
        optimizer.step()
    return value, optimizer


def predict(model: ViTModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class for each image, evaluated without recording a graph."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(images[start : start + batch_size]).data
            out.append(logits.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ViTModel, path: str | Path, extra: dict | None = None) -> Path:
    """Write an ``.npz`` holding every parameter plus a JSON header.

    The header stores the format version, the config echo, the parameter
    order and ``extra``; arrays are stored at their own precision, so a
    round trip is bit-exact.
    """
    path = Path(path)
    meta = {
        "format": "attnrobust-vit",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "order": list(model.params),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": p.data for k, p in model.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[ViTModel, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`; returns ``(model, extra)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != "attnrobust-vit":
            raise DataError(f"{path} is not an attnrobust checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise DataError(f"checkpoint version {meta['version']} is newer than supported {CHECKPOINT_VERSION}")
        params = {k: Tensor(z[f"param/{k}"].copy(), requires_grad=True, name=k) for k in meta["order"]}
    return ViTModel(ViTConfig.from_dict(meta["config"]), params), meta.get("extra", {})
