"""Gradient verification: tape gradients against central finite differences.

Every check scalarizes its output as ``sum(out * R)`` with a fixed random
``R``. A plain sum would be blind to some directions: the column-normalized
Sinkhorn plan has constant column sums, so ``sum(W V)`` does not depend on
``Q`` or ``K`` at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import VARIANTS, AttentionConfig, attend
from .rng import make_rng
from .tensor import Tensor
from .vit import ViTConfig, ViTModel

KERNEL_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass(frozen=True)
class GradCheck:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<40} rel_err={self.error:.3e}  tol={self.tol:.0e}"


def numeric_grad(loss_fn, leaf: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``leaf``, perturbing it in place."""
    data = leaf.data
    flat = data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(data.shape)


def analytic_grads(loss_fn, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for t in leaves.values():
        t.grad = None
    T.backward(loss_fn())
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in leaves.items()}


def check_leaves(prefix: str, loss_fn, leaves: dict[str, Tensor], tol: float) -> list[GradCheck]:
    grads = analytic_grads(loss_fn, leaves)
    return [
        GradCheck(f"{prefix}/{k}", T.relative_error(grads[k], numeric_grad(loss_fn, t)), tol)
        for k, t in leaves.items()
    ]


def kernel_checks(seed: int = 0, n: int = 5, d: int = 4, tol: float = KERNEL_TOL) -> list[GradCheck]:
    """d out / d{Q, K, V} (and ``m`` for cosine) for every variant in float64."""
    rng = make_rng(seed, "gradcheck", "kernels")
    results = []
    for variant in VARIANTS:
        leaves = {k: Tensor(rng.normal(size=(n, d)), requires_grad=True) for k in "QKV"}
        weights = rng.normal(size=(n, d))
        cfg = AttentionConfig(variant=variant, head_dim=d, heads=1).resolve(n)
        if variant == "cosine":
            leaves["m"] = Tensor(np.array(0.3), requires_grad=True)

        def loss(leaves=leaves, weights=weights, cfg=cfg):
            out = attend(leaves["Q"], leaves["K"], leaves["V"], cfg, m=leaves.get("m"))
            return (out * weights).sum()

        results += check_leaves(variant, loss, leaves, tol)
    return results


def tiny_vit_config(variant: str = "softmax") -> ViTConfig:
    return ViTConfig(
        image_size=4, patch_size=2, in_channels=2, embed_dim=8, depth=1, heads=2,
        mlp_ratio=2.0, num_classes=3, dtype="float64",
        attention=AttentionConfig(variant=variant),
    )


def model_checks(
    seed: int = 0, variants: tuple[str, ...] = VARIANTS, batch: int = 2, tol: float = MODEL_TOL
) -> list[GradCheck]:
    """Cross-entropy gradient of a depth-1 ViT w.r.t. every parameter tensor.

    Parameters are redrawn at unit-ish scale first: the default init zeroes
    the classifier, which would make every upstream gradient exactly zero
    and the comparison vacuous.
    """
    results = []
    for variant in variants:
        rng = make_rng(seed, "gradcheck", "model", variant)
        cfg = tiny_vit_config(variant)
        model = ViTModel.init(cfg, seed)
        for p in model.params.values():
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
        images = rng.uniform(size=(batch, cfg.in_channels, cfg.image_size, cfg.image_size))
        labels = rng.integers(0, cfg.num_classes, batch)

        def loss(model=model, images=images, labels=labels):
            return T.cross_entropy(model(images), labels)

        results += check_leaves(f"vit[{variant}]", loss, model.params, tol)
    return results


def run_suite(seed: int = 0) -> list[GradCheck]:
    return kernel_checks(seed) + model_checks(seed)
