import numpy as np
import pytest

from promamba import tensor as T
from promamba.config import ModelConfig
from promamba.encoder import (
    count_params,
    encode,
    init_encoder,
    inject_mask,
    param_shapes,
    patch_embed,
)
from promamba.rng import Rng
from promamba.tensor import (
    ContractError,
    DimensionError,
    DomainError,
    GradCheckReport,
    Tape,
    Tensor,
    backward,
)


def tiny_cfg(**kw):
    base = dict(image_size=16, patch_size=8, d_model=16, depth=2, d_state=4,
                decoder_dim=16, n_heads=2)
    base.update(kw)
    return ModelConfig(**base)


def fd_check(f, inputs, tol, max_entries=24, eps=1e-5, seed=0):
    """Finite-difference check for a closure over live parameter tensors.

    ``f`` takes no arguments and reads the tensors in ``inputs`` directly, so
    gradients land on them and perturbations can be applied in place.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        backward(f())
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t in inputs:
        t.requires_grad = False
        t.grad = None
    rng = np.random.default_rng(seed)
    worst = 0.0
    for which, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_entries, n), replace=False)
        ga = analytic[which].reshape(-1)
        for i in coords:
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            denom = max(abs(ga[i]), abs(numeric), 1e-4)
            worst = max(worst, abs(ga[i] - numeric) / denom)
    return GradCheckReport(max_rel_err=worst, tol=tol, passed=worst <= tol)


class TestPatchEmbed:
    def test_token_grid_64_patch16(self):
        cfg = ModelConfig(image_size=64, patch_size=16, d_model=32, depth=1, decoder_dim=16, n_heads=2)
        params = init_encoder(cfg, Rng(0), "float64")
        emb = patch_embed(Tensor(np.zeros((3, 64, 64)), "float64"), params, cfg)
        assert emb.tokens.shape == (16, 32)
        assert emb.grid == (4, 4)

    def test_paper_scale_token_count(self):
        assert ModelConfig.paper_scale(d_model=192, depth=12).n_tokens == 1024

    def test_zero_image_zero_embeddings(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(0), "float64")
        params.pos.data[:] = 0
        params.patch_b.data[:] = 0
        emb = patch_embed(Tensor(np.zeros((3, 16, 16)), "float64"), params, cfg)
        np.testing.assert_array_equal(emb.tokens.data, 0.0)

    def test_raster_order(self):
        cfg = tiny_cfg(depth=1)
        params = init_encoder(cfg, Rng(1), "float64")
        params.pos.data[:] = 0
        img = np.zeros((3, 16, 16))
        img[:, 0, 8] = 1.0  # patch row 0, col 1 -> raster token index 1
        emb = patch_embed(Tensor(img, "float64"), params, cfg)
        moved = np.abs(emb.tokens.data - params.patch_b.data[None, :]).sum(axis=1)
        assert moved.argmax() == 1

    def test_size_mismatch(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(0), "float64")
        with pytest.raises(DimensionError):
            patch_embed(Tensor(np.zeros((3, 8, 8)), "float64"), params, cfg)


class TestEncode:
    def test_depth_zero_layer_stack_contributes_nothing(self):
        cfg = tiny_cfg(depth=0)
        params = init_encoder(cfg, Rng(2), "float64")
        img = Tensor(np.random.default_rng(0).random((3, 16, 16)), "float64")
        out = encode(img, params, cfg)
        ref = patch_embed(img, params, cfg).tokens
        expected = T.layer_norm(ref, params.final_norm[0], params.final_norm[1], eps=1e-5)
        np.testing.assert_allclose(out.tokens.data, expected.data, rtol=1e-12)

    def test_mask_rejected_when_flag_off(self):
        cfg = tiny_cfg(input_mask=False)
        params = init_encoder(cfg, Rng(3), "float64")
        with pytest.raises(ContractError):
            encode(
                Tensor(np.zeros((3, 16, 16)), "float64"), params, cfg,
                train_mask=Tensor(np.ones((1, 16, 16)), "float64"), training=True,
            )

    def test_mask_rejected_at_inference(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(4), "float64")
        with pytest.raises(ContractError):
            encode(
                Tensor(np.zeros((3, 16, 16)), "float64"), params, cfg,
                train_mask=Tensor(np.ones((1, 16, 16)), "float64"), training=False,
            )

    def test_two_layer_gradient(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(5), "float64")
        named = params.named()
        subset = [
            "encoder.patch.weight",
            "encoder.pos",
            "encoder.layers.0.in_proj",
            "encoder.layers.0.fwd.dt_bias",
            "encoder.layers.1.fwd.A_log",
            "encoder.layers.1.bwd.x_proj",
            "encoder.layers.1.norm.gain",
            "encoder.final_norm.bias",
        ]
        img = Tensor(np.random.default_rng(1).random((3, 16, 16)), "float64")
        w = Tensor(np.random.default_rng(2).normal(size=(cfg.n_tokens, cfg.d_model)), "float64")

        def f():
            out = encode(img, params, cfg, parallel_scan=False)
            return T.tsum(T.mul(out.tokens, w))

        report = fd_check(f, [img] + [named[n] for n in subset], tol=1e-4)
        assert report.passed, report


class TestInjectMask:
    def test_zero_mask_zero_injection(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(6), "float64")
        out = inject_mask(Tensor(np.zeros((1, 16, 16)), "float64"), params, cfg)
        np.testing.assert_array_equal(out.data, 0.0)
        assert out.shape == (cfg.n_tokens, cfg.d_model)

    def test_full_vs_empty_masks_differ(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(7), "float64")
        zero = inject_mask(Tensor(np.zeros((1, 16, 16)), "float64"), params, cfg)
        ones = inject_mask(Tensor(np.ones((1, 16, 16)), "float64"), params, cfg)
        assert np.abs(ones.data - zero.data).max() > 0

    def test_out_of_range_mask_rejected(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(8), "float64")
        with pytest.raises(DomainError):
            inject_mask(Tensor(np.full((1, 16, 16), 2.0), "float64"), params, cfg)

    def test_conv_stack_gradient(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(9), "float64")
        named = params.named()
        subset = [n for n in named if n.startswith("encoder.inject")]
        w = Tensor(np.random.default_rng(3).normal(size=(cfg.n_tokens, cfg.d_model)), "float64")
        mask = Tensor(
            (np.random.default_rng(4).random((1, 16, 16)) > 0.5).astype(np.float64), "float64"
        )

        def f():
            return T.tsum(T.mul(inject_mask(mask, params, cfg), w))

        report = fd_check(f, [named[n] for n in subset], tol=1e-5)
        assert report.passed, report

    def test_two_masks_differ_through_encode(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, Rng(10), "float64")
        img = Tensor(np.random.default_rng(5).random((3, 16, 16)), "float64")
        m1 = np.zeros((1, 16, 16))
        m1[0, :8, :8] = 1
        m2 = np.zeros((1, 16, 16))
        m2[0, 8:, 8:] = 1
        e1 = encode(img, params, cfg, Tensor(m1, "float64"), training=True)
        e2 = encode(img, params, cfg, Tensor(m2, "float64"), training=True)
        assert np.abs(e1.tokens.data - e2.tokens.data).max() > 0


class TestPermutationSensitivity:
    def test_scan_is_order_dependent(self):
        cfg = tiny_cfg(image_size=32, patch_size=8, input_mask=False)
        params = init_encoder(cfg, Rng(11), "float64")
        # zero the positional embeddings so only the scan's order-dependence
        # can distinguish the two sides (attention would make them equal)
        params.pos.data[:] = 0
        rng = np.random.default_rng(6)
        img = rng.random((3, 32, 32))
        perm = rng.permutation(cfg.n_tokens)
        base = encode(Tensor(img, "float64"), params, cfg).tokens.data
        g, p = cfg.grid, cfg.patch_size
        patches = img.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(cfg.n_tokens, 3, p, p)
        shuffled = patches[perm].reshape(g, g, 3, p, p).transpose(2, 0, 3, 1, 4).reshape(3, 32, 32)
        enc_shuffled = encode(Tensor(shuffled, "float64"), params, cfg).tokens.data
        assert np.abs(enc_shuffled - base[perm]).max() > 1e-6


class TestCountParams:
    @pytest.mark.parametrize(
        "d_model,depth,target",
        [(192, 24, 11e6), (384, 24, 30e6), (768, 12, 54e6), (768, 18, 78e6), (768, 24, 102e6)],
    )
    def test_table_targets_within_twenty_percent(self, d_model, depth, target):
        count = count_params(ModelConfig.paper_scale(d_model=d_model, depth=depth))
        assert abs(count - target) / target <= 0.20, (count, target)

    def test_depth_linearity(self):
        c12 = count_params(ModelConfig.paper_scale(d_model=768, depth=12))
        c18 = count_params(ModelConfig.paper_scale(d_model=768, depth=18))
        c24 = count_params(ModelConfig.paper_scale(d_model=768, depth=24))
        per_layer = (c24 - c12) // 12
        assert c24 - c12 == per_layer * 12
        assert c18 == c12 + 6 * per_layer

    def test_monotone_scaling(self):
        widths = [count_params(ModelConfig.paper_scale(d_model=d, depth=24)) for d in (192, 384, 768)]
        depths = [count_params(ModelConfig.paper_scale(d_model=768, depth=d)) for d in (12, 18, 24)]
        assert widths[0] < widths[1] < widths[2]
        assert depths[0] < depths[1] < depths[2]

    def test_shapes_match_allocation(self):
        from promamba.model import PromptMamba

        cfg = tiny_cfg()
        model = PromptMamba.build(cfg, Rng(0))
        actual = {name: t.shape for name, t in model.params.items()}
        assert actual == param_shapes(cfg)

    def test_ablation_flags_change_manifest(self):
        base = param_shapes(tiny_cfg())
        no_bwd = param_shapes(tiny_cfg(bidirectional=False))
        no_mask = param_shapes(tiny_cfg(input_mask=False))
        assert any(".bwd." in k for k in base)
        assert not any(".bwd." in k for k in no_bwd)
        assert any("inject" in k for k in base)
        assert not any("inject" in k for k in no_mask)
