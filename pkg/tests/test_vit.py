import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnrobust import tensor as T
from attnrobust.attention import VARIANTS, AttentionConfig
from attnrobust.errors import ConfigError, DataError, DimensionError
from attnrobust.optim import CosineSchedule
from attnrobust.tensor import Tensor
from attnrobust.vit import (
    ViTConfig,
    ViTModel,
    forward,
    load_checkpoint,
    make_optimizer,
    patchify,
    predict,
    save_checkpoint,
    train_step,
    unpatchify,
)


def tiny(variant="softmax", **kw):
    base = dict(image_size=8, patch_size=4, embed_dim=16, depth=1, heads=2, num_classes=10, dtype="float64")
    base.update(kw)
    return ViTConfig(attention=AttentionConfig(variant=variant), **base)


# ---------------------------------------------------------------------------
# patchify


def test_patchify_single_patch_order():
    img = np.arange(4.0).reshape(1, 2, 2)
    np.testing.assert_array_equal(patchify(img, 2).data, [[0.0, 1.0, 2.0, 3.0]])


def test_patchify_channel_major_then_row_then_column():
    img = np.arange(8.0).reshape(2, 2, 2)
    np.testing.assert_array_equal(patchify(img, 2).data, [[0, 1, 2, 3, 4, 5, 6, 7]])


def test_patchify_raster_order_and_bijective():
    img = np.arange(16.0).reshape(1, 4, 4)
    p = patchify(img, 2).data
    assert p.shape == (4, 4)
    np.testing.assert_array_equal(p[1], [2, 3, 6, 7])  # top-right patch second
    np.testing.assert_array_equal(p[2], [8, 9, 12, 13])
    np.testing.assert_array_equal(unpatchify(p, 1, 4, 4, 2), img)


def test_patchify_cifar_shape():
    assert patchify(np.zeros((3, 32, 32)), 4).shape == (64, 48)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 99))
def test_patchify_roundtrip(c, gh, gw, p, seed):
    img = np.random.default_rng(seed).normal(size=(c, gh * p, gw * p))
    np.testing.assert_array_equal(unpatchify(patchify(img, p).data, c, gh * p, gw * p, p), img)


def test_patchify_indivisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((3, 6, 6)), 4)


def test_patchify_batch_matches_single(rng):
    imgs = rng.normal(size=(3, 2, 4, 4))
    batched = patchify(imgs, 2).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], patchify(imgs[i], 2).data)


# ---------------------------------------------------------------------------
# config and model layout


def test_config_invariants():
    with pytest.raises(ConfigError):
        ViTConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        ViTConfig(embed_dim=30, heads=4)
    with pytest.raises(ConfigError):
        ViTConfig(pool="max")


def test_config_syncs_attention_geometry():
    cfg = ViTConfig(embed_dim=64, heads=4, attention=AttentionConfig(variant="sigmoid"))
    assert (cfg.attention.heads, cfg.attention.head_dim) == (4, 16)
    assert cfg.attention.sigmoid_bias == pytest.approx(-math.log(65))


def test_config_dict_roundtrip():
    cfg = tiny("cosine", pool="mean")
    assert ViTConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("variant", VARIANTS)
def test_positional_table_length(variant):
    cfg = ViTConfig(attention=AttentionConfig(variant=variant))
    model = ViTModel.init(cfg, 0)
    assert model.params["pos_embed"].shape == (1, 1 + (32 // 4) ** 2, 64)
    assert ("blocks.0.attn.gamma" in model.params) == (variant == "sigmoid")
    assert ("blocks.0.attn.m" in model.params) == (variant == "cosine")


def test_init_is_seeded():
    a, b = ViTModel.init(tiny(), 5), ViTModel.init(tiny(), 5)
    assert a.parameter_hash() == b.parameter_hash()
    assert ViTModel.init(tiny(), 6).parameter_hash() != a.parameter_hash()


def test_init_truncated_normal_scale():
    w = ViTModel.init(ViTConfig(), 0).params["blocks.0.mlp.fc1.weight"].data
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert 0.012 < w.std() < 0.02


# ---------------------------------------------------------------------------
# forward


def test_zero_head_gives_equal_logits(rng):
    model = ViTModel.init(tiny(), 0)
    logits = model(rng.normal(size=(4, 3, 8, 8))).data
    assert np.all(logits == logits[:, :1])


def test_cifar_logit_shape():
    model = ViTModel.init(ViTConfig(depth=1), 0)
    assert forward(model, np.zeros((3, 32, 32), dtype=np.float32)).shape == (10,)


def test_identical_images_identical_logits(rng):
    model = ViTModel.init(tiny("doubly_stochastic"), 0)
    model.params["head.weight"].data[...] = rng.normal(size=(16, 10))
    img = rng.normal(size=(3, 8, 8))
    out = model(np.stack([img, img])).data
    assert out[0].tobytes() == out[1].tobytes()
    assert model(img).data.tobytes() == model(img).data.tobytes()


def test_forward_rejects_wrong_size():
    with pytest.raises(DimensionError):
        ViTModel.init(tiny(), 0)(np.zeros((3, 16, 16)))


@pytest.mark.parametrize("variant", ["softmax", "cosine", "doubly_stochastic"])
def test_patch_permutation_invariance_without_positions(variant, rng):
    cfg = tiny(variant, image_size=12, patch_size=4, pool="mean")
    model = ViTModel.init(cfg, 1)
    for p in model.params.values():
        p.data[...] = rng.normal(scale=0.3, size=p.shape)
    model.params["pos_embed"].data[...] = 0.0
    img = rng.normal(size=(3, 12, 12))
    perm = rng.permutation(9)
    tiles = patchify(img, 4).data[perm]
    shuffled = unpatchify(tiles, 3, 12, 12, 4)
    np.testing.assert_allclose(model(shuffled).data, model(img).data, atol=1e-6)


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("variant", VARIANTS)
def test_random_parameter_subset_gradients(variant):
    r = np.random.default_rng(VARIANTS.index(variant))
    model = ViTModel.init(tiny(variant), 0)
    for p in model.params.values():
        p.data[...] = r.normal(scale=0.5, size=p.shape)
    x = r.normal(size=(2, 3, 8, 8))
    y = r.integers(0, 10, 2)

    def loss():
        return T.cross_entropy(model(x), y)

    T.backward(loss())
    names = list(model.params)
    analytic, numeric = [], []
    for name in (names[i] for i in r.integers(0, len(names), 16)):
        p = model.params[name]
        j = int(r.integers(0, p.size))
        flat = p.data.reshape(-1)
        orig = flat[j]
        with T.no_grad():
            flat[j] = orig + 1e-6
            hi = loss().item()
            flat[j] = orig - 1e-6
            lo = loss().item()
            flat[j] = orig
        analytic.append(p.grad.reshape(-1)[j])
        numeric.append((hi - lo) / 2e-6)
    assert T.relative_error(np.array(analytic), np.array(numeric)) <= 1e-3


# ---------------------------------------------------------------------------
# training


def _opt(model, lr=1e-3, steps=200):
    return make_optimizer(model, lr=lr, total_steps=steps, weight_decay=0.0, min_lr=lr, grad_clip=None)


@pytest.mark.parametrize("variant", ["softmax", "doubly_stochastic"])
def test_overfit_single_example(variant):
    model = ViTModel.init(tiny(variant), 0)
    x = np.random.default_rng(0).normal(size=(1, 3, 8, 8))
    y = np.array([3])
    opt = _opt(model)
    losses = [train_step(model, (x, y), opt)[0] for _ in range(200)]
    assert losses[-1] < 0.1
    assert np.mean(np.diff(losses) <= 0) >= 0.9
    assert model.all_finite()


def test_zero_learning_rate_leaves_parameters_bitwise(rng):
    model = ViTModel.init(tiny("sigmoid"), 0)
    before = model.parameter_hash()
    opt = _opt(model, lr=0.0)
    train_step(model, (rng.normal(size=(2, 3, 8, 8)), np.array([1, 2])), opt)
    assert model.parameter_hash() == before


def test_initial_loss_near_log_classes(rng):
    model = ViTModel.init(tiny(), 0)
    loss = T.cross_entropy(model(rng.normal(size=(8, 3, 8, 8))), rng.integers(0, 10, 8)).item()
    assert abs(loss - math.log(10)) <= 0.2 * math.log(10)


@pytest.mark.parametrize("labels", [[0, 10], [-1, 0], []])
def test_train_step_rejects_bad_labels(labels):
    model = ViTModel.init(tiny(), 0)
    x = np.zeros((len(labels), 3, 8, 8))
    with pytest.raises(DataError):
        train_step(model, (x, np.array(labels, dtype=int)), _opt(model))


def test_float32_training_step_stays_float32(rng):
    model = ViTModel.init(tiny(dtype="float32"), 0)
    opt = _opt(model)
    train_step(model, (rng.normal(size=(2, 3, 8, 8)).astype(np.float32), np.array([0, 1])), opt)
    assert all(p.dtype == np.float32 for p in model.params.values())


def test_predict_batches_consistently(rng):
    model = ViTModel.init(tiny(), 0)
    model.params["head.weight"].data[...] = rng.normal(size=(16, 10))
    x = rng.normal(size=(7, 3, 8, 8))
    np.testing.assert_array_equal(predict(model, x, batch_size=3), predict(model, x, batch_size=7))


def test_schedule_warmup_then_cosine():
    s = CosineSchedule(1.0, total_steps=10, warmup_steps=2, min_lr=0.1)
    assert s(0) == 0.5 and s(1) == 1.0
    assert s(2) == pytest.approx(1.0)
    assert s(10) == pytest.approx(0.1)
    vals = [s(i) for i in range(2, 11)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_weight_decay_skips_biases_and_norms():
    model = ViTModel.init(tiny(), 0)
    nd = model.no_decay_names()
    assert "patch_embed.bias" in nd and "blocks.0.norm1.weight" in nd and "pos_embed" in nd
    assert "blocks.0.attn.w_q" not in nd


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, dtype, rng):
    model = ViTModel.init(tiny("cosine", dtype=dtype), 3)
    for p in model.params.values():
        p.data[...] = rng.normal(size=p.shape)
    path = save_checkpoint(model, tmp_path / "m.npz", {"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert loaded.config == model.config
    assert loaded.parameter_hash() == model.parameter_hash()
    assert list(loaded.params) == list(model.params)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, __meta__=np.frombuffer(b'{"format": "other", "version": 1}', dtype=np.uint8))
    with pytest.raises(DataError):
        load_checkpoint(path)
