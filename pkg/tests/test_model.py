"""Embedding, encoder/decoder, reconstruction heads, loss, and gradients."""

import numpy as np
import pytest

from voxmae import (
    ModelConfig,
    Volume4D,
    backward,
    decoder_inputs,
    embed_token,
    encoder_forward,
    forward_loss,
    init_model_params,
    load_checkpoint,
    positional_embedding,
    reconstruct,
    sample_mask,
    save_checkpoint,
    scale_aware_loss,
)
from voxmae.errors import (
    BadDimError,
    CountMismatchError,
    EmptyInputError,
    LengthMismatchError,
    ShapeMismatchError,
)
from voxmae.model.layers import layernorm_fwd
from voxmae.model.posembed import sincos_embedding, token_center
from voxmae.tokenizer import TokenRec, extract_token_voxels
from voxmae.train import gradcheck_layout

from oracles import naive_embed_coarse, naive_loss

TOY = ModelConfig.toy_profile()


def toy_setup(seed=0, cfg=TOY, ratio=0.75, dtype=np.float64):
    layout = gradcheck_layout(cfg)
    h, w, d, t = layout.volume_dims
    rng = np.random.default_rng(seed)
    vol = Volume4D(rng.standard_normal((t, d, w, h)), tr_seconds=0.72)
    plan = sample_mask(layout, ratio, seed)
    params = init_model_params(cfg, seed=seed, dtype=dtype)
    return params, vol, layout, plan


class TestPositionalEmbedding:
    def test_center_of_origin_token(self):
        tok = TokenRec((0, 0, 0), 0)
        assert token_center(tok, 4) == (1.5, 1.5, 1.5)
        p = positional_embedding(tok, 12, base_edge=4)
        assert p[0] == pytest.approx(np.sin(1.5), abs=1e-12)

    def test_scale_does_not_enter(self):
        fine = TokenRec((2, 2, 2), 0)      # edge 4, center 3.5
        coarse = TokenRec((0, 0, 0), 1)    # edge 8, center 3.5
        a = positional_embedding(fine, 24, base_edge=4)
        b = positional_embedding(coarse, 24, base_edge=4)
        np.testing.assert_array_equal(a, b)

    def test_distinct_centers_differ(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            c1, c2 = rng.uniform(0, 40, size=(2, 3))
            e1 = sincos_embedding(c1[None], 24)
            e2 = sincos_embedding(c2[None], 24)
            assert np.abs(e1 - e2).max() > 1e-9

    def test_non_multiple_of_six_zero_padded(self):
        p = sincos_embedding(np.array([[1.0, 2.0, 3.0]]), 16)
        assert p.shape == (1, 16)
        assert np.all(p[0, 12:] == 0.0)

    def test_bad_dim(self):
        with pytest.raises(BadDimError):
            sincos_embedding(np.zeros((1, 3)), 7)
        with pytest.raises(BadDimError):
            sincos_embedding(np.zeros((1, 3)), 4)


class TestEmbedToken:
    def test_zero_init_reduces_to_single_path(self):
        params, vol, layout, _ = toy_setup(1)
        cfg = params.config
        for tok in layout.tokens:
            if tok.scale == 0:
                continue
            voxels = extract_token_voxels(vol, tok, cfg.base_edge)
            z = embed_token(params, tok, voxels)
            factor = 1 << tok.scale
            b = cfg.base_edge
            pooled = voxels.reshape(cfg.frames, b, factor, b, factor, b, factor).mean(
                axis=(2, 4, 6)
            )
            single = pooled.reshape(-1) @ params["phi.W"] + params["phi.b"]
            pos = sincos_embedding(
                np.array([token_center(tok, b)]), cfg.embed_dim
            )[0]
            assert np.array_equal(z, single + pos)

    def test_fine_token_with_zero_phi(self):
        params, vol, layout, _ = toy_setup(2)
        cfg = params.config
        params.arrays["phi.W"][:] = 0.0
        params.arrays["phi.b"][:] = np.arange(cfg.embed_dim, dtype=np.float64)
        tok = next(t for t in layout.tokens if t.scale == 0)
        voxels = extract_token_voxels(vol, tok, cfg.base_edge)
        z = embed_token(params, tok, voxels)
        pos = sincos_embedding(np.array([token_center(tok, cfg.base_edge)]), cfg.embed_dim)[0]
        np.testing.assert_allclose(z, params.arrays["phi.b"] + pos, atol=1e-12)

    def test_coarse_matches_naive_composition(self):
        params, vol, layout, _ = toy_setup(3)
        cfg = params.config
        rng = np.random.default_rng(33)
        # randomize the zero-initialized residual branch too
        params.arrays["zero_mlp.W2"][:] = rng.standard_normal(
            params.arrays["zero_mlp.W2"].shape
        )
        params.arrays["zero_mlp.b2"][:] = rng.standard_normal(cfg.embed_dim)
        for tok in layout.tokens:
            if tok.scale == 0:
                continue
            voxels = extract_token_voxels(vol, tok, cfg.base_edge)
            z = embed_token(params, tok, voxels)
            pos = sincos_embedding(
                np.array([token_center(tok, cfg.base_edge)]), cfg.embed_dim
            )[0]
            want = naive_embed_coarse(
                params.arrays, voxels, tok.scale, pos, cfg.frames, cfg.base_edge
            )
            np.testing.assert_allclose(z, want, atol=1e-10)

    def test_three_scale_hierarchy_matches_naive(self):
        cfg = ModelConfig.toy_profile(num_scales=3)
        params = init_model_params(cfg, seed=4, dtype=np.float64)
        rng = np.random.default_rng(44)
        params.arrays["zero_mlp.W2"][:] = rng.standard_normal(
            params.arrays["zero_mlp.W2"].shape
        )
        tok = TokenRec((0, 0, 0), 2)
        voxels = rng.standard_normal(cfg.patch_len(2))
        z = embed_token(params, tok, voxels)
        pos = sincos_embedding(np.array([token_center(tok, cfg.base_edge)]), cfg.embed_dim)[0]
        want = naive_embed_coarse(params.arrays, voxels, 2, pos, cfg.frames, cfg.base_edge)
        np.testing.assert_allclose(z, want, atol=1e-10)

    def test_length_mismatch(self):
        params, vol, layout, _ = toy_setup(5)
        with pytest.raises(LengthMismatchError):
            embed_token(params, layout.tokens[0], np.zeros(7))


class TestEncoder:
    def test_depth_zero_identity(self):
        cfg = ModelConfig.toy_profile(enc_depth=0)
        params = init_model_params(cfg, seed=0, dtype=np.float64)
        x = np.random.default_rng(1).standard_normal((5, cfg.embed_dim))
        np.testing.assert_array_equal(encoder_forward(params, x), x)

    def test_single_token_closed_form(self):
        cfg = ModelConfig.toy_profile(enc_depth=1)
        params = init_model_params(cfg, seed=2, dtype=np.float64)
        p = params.arrays
        x = np.random.default_rng(3).standard_normal((1, cfg.embed_dim))
        got = encoder_forward(params, x)

        # softmax over a single key is 1, so attention passes the value
        h, _ = layernorm_fwd(x, p["enc.0.ln1.g"], p["enc.0.ln1.b"])
        qkv = h @ p["enc.0.attn.Wqkv"] + p["enc.0.attn.bqkv"]
        v = qkv[:, 2 * cfg.embed_dim:]
        x1 = x + v @ p["enc.0.attn.Wproj"] + p["enc.0.attn.bproj"]
        h2, _ = layernorm_fwd(x1, p["enc.0.ln2.g"], p["enc.0.ln2.b"])
        f1 = h2 @ p["enc.0.mlp.W1"] + p["enc.0.mlp.b1"]
        from scipy.special import erf

        g = 0.5 * f1 * (1 + erf(f1 / np.sqrt(2)))
        want = x1 + g @ p["enc.0.mlp.W2"] + p["enc.0.mlp.b2"]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_permutation_equivariance(self):
        params, vol, layout, plan = toy_setup(6)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((9, TOY.embed_dim))
        perm = rng.permutation(9)
        out = encoder_forward(params, x)
        out_perm = encoder_forward(params, x[perm])
        assert np.abs(out_perm - out[perm]).max() < 1e-5

    def test_empty_input(self):
        params = init_model_params(TOY, seed=0)
        with pytest.raises(EmptyInputError):
            encoder_forward(params, np.zeros((0, TOY.embed_dim)))


class TestDecoderInputs:
    def test_nothing_masked_means_no_mask_token(self):
        params, vol, layout, _ = toy_setup(8)
        plan = sample_mask(layout, 0.0, seed=0)
        latents = np.random.default_rng(9).standard_normal((len(layout), TOY.dec_dim))
        seq = decoder_inputs(params, latents, layout, plan)
        mt = params["mask_token"]
        pos = sincos_embedding(
            np.array([token_center(t, layout.base_edge) for t in layout.tokens]), TOY.dec_dim
        )
        body = seq - pos - params["scale_table"][[t.scale for t in layout.tokens]]
        for row in body:
            assert not np.allclose(row, mt)

    def test_everything_masked_is_mask_token_everywhere(self):
        params, vol, layout, _ = toy_setup(10)
        plan = sample_mask(layout, 1.0, seed=0)
        params.arrays["scale_table"][:] = 0.0
        seq = decoder_inputs(params, np.zeros((0, TOY.dec_dim)), layout, plan)
        pos = sincos_embedding(
            np.array([token_center(t, layout.base_edge) for t in layout.tokens]), TOY.dec_dim
        )
        np.testing.assert_allclose(seq - pos, np.tile(params["mask_token"], (len(layout), 1)))

    def test_scatter_matches_naive(self):
        params, vol, layout, plan = toy_setup(11)
        n_vis = int((~plan.masked).sum())
        latents = np.random.default_rng(12).standard_normal((n_vis, TOY.dec_dim))
        seq = decoder_inputs(params, latents, layout, plan)
        vis_iter = iter(latents)
        for i, tok in enumerate(layout.tokens):
            base = params["mask_token"] if plan.masked[i] else next(vis_iter)
            pos = sincos_embedding(
                np.array([token_center(tok, layout.base_edge)]), TOY.dec_dim
            )[0]
            want = base + pos + params["scale_table"][tok.scale]
            np.testing.assert_allclose(seq[i], want, atol=1e-12)

    def test_count_mismatch(self):
        params, vol, layout, plan = toy_setup(13)
        with pytest.raises(CountMismatchError):
            decoder_inputs(params, np.zeros((1, TOY.dec_dim)), layout, plan)


class TestReconstruct:
    def test_zero_heads_give_zero_predictions(self):
        params, vol, layout, _ = toy_setup(14)
        for s in range(TOY.num_scales):
            params.arrays[f"psi.{s}.W"][:] = 0.0
            params.arrays[f"psi.{s}.b"][:] = 0.0
        decoded = np.random.default_rng(15).standard_normal((len(layout), TOY.dec_dim))
        preds = reconstruct(params, decoded, layout)
        for tok, pred in zip(layout.tokens, preds):
            assert pred.shape == (TOY.patch_len(tok.scale),)
            assert not pred.any()

    def test_prediction_lengths_default_patching(self):
        cfg = ModelConfig.toy_profile(base_edge=4, frames=3)
        params = init_model_params(cfg, seed=0)
        layout = gradcheck_layout(cfg)
        decoded = np.zeros((len(layout), cfg.dec_dim), dtype=np.float32)
        preds = reconstruct(params, decoded, layout)
        for tok, pred in zip(layout.tokens, preds):
            assert pred.size == 3 * (64 if tok.scale == 0 else 512)

    def test_matches_naive_affine(self):
        params, vol, layout, _ = toy_setup(16)
        decoded = np.random.default_rng(17).standard_normal((len(layout), TOY.dec_dim))
        preds = reconstruct(params, decoded, layout)
        for i, tok in enumerate(layout.tokens):
            want = decoded[i] @ params[f"psi.{tok.scale}.W"] + params[f"psi.{tok.scale}.b"]
            np.testing.assert_allclose(preds[i], want, atol=1e-12)


class TestScaleAwareLoss:
    def test_perfect_predictions_zero_loss(self):
        params, vol, layout, plan = toy_setup(18)
        targets = [
            extract_token_voxels(vol, t, layout.base_edge).astype(np.float64)
            for t in layout.tokens
        ]
        rep = scale_aware_loss(targets, targets, layout, plan)
        assert rep.total == 0.0

    @pytest.mark.parametrize("eps", [1e-3, 1.0, 1e3])
    def test_scale_balance(self, eps):
        params, vol, layout, plan = toy_setup(19)
        t = TOY.frames
        targets = [
            extract_token_voxels(vol, tok, layout.base_edge).astype(np.float64)
            for tok in layout.tokens
        ]
        preds = [y + np.sqrt(eps) for y in targets]
        rep = scale_aware_loss(preds, targets, layout, plan)
        for s in range(TOY.num_scales):
            if rep.masked_counts[s]:
                assert abs(rep.per_scale[s] - t * eps) / (t * eps) < 1e-9
        want_total = t * eps * sum(1 for c in rep.masked_counts if c)
        assert abs(rep.total - want_total) / want_total < 1e-9

    @pytest.mark.parametrize("patch_norm", [False, True])
    def test_matches_naive_triple_loop(self, patch_norm):
        params, vol, layout, plan = toy_setup(20)
        rng = np.random.default_rng(21)
        targets = [rng.standard_normal(TOY.patch_len(t.scale)) for t in layout.tokens]
        preds = [rng.standard_normal(TOY.patch_len(t.scale)) for t in layout.tokens]
        rep = scale_aware_loss(preds, targets, layout, plan, patch_norm=patch_norm)
        scales = [t.scale for t in layout.tokens]
        volumes = [TOY.voxel_volume(s) for s in range(TOY.num_scales)]
        want_scales, want_total = naive_loss(
            preds, targets, scales, plan.masked, volumes, patch_norm
        )
        np.testing.assert_allclose(rep.per_scale, want_scales, rtol=1e-6)
        assert abs(rep.total - want_total) <= 1e-6 * abs(want_total)

    def test_empty_scale_skipped(self):
        params, vol, layout, _ = toy_setup(22)
        masked = np.zeros(len(layout), dtype=bool)
        fine = next(t.linear_index for t in layout.tokens if t.scale == 0)
        masked[fine] = True
        from voxmae.tokenizer import MaskPlan

        plan = MaskPlan(masked, 0.1, 0)
        targets = [np.zeros(TOY.patch_len(t.scale)) for t in layout.tokens]
        rep = scale_aware_loss(targets, targets, layout, plan)
        assert rep.masked_counts[1] == 0
        assert rep.per_scale[1] == 0.0

    def test_patch_norm_constant_target_finite(self):
        params, vol, layout, plan = toy_setup(23)
        targets = [np.full(TOY.patch_len(t.scale), 4.2) for t in layout.tokens]
        preds = [np.zeros(TOY.patch_len(t.scale)) for t in layout.tokens]
        rep = scale_aware_loss(preds, targets, layout, plan, patch_norm=True)
        assert np.isfinite(rep.total)

    def test_shape_mismatch(self):
        params, vol, layout, plan = toy_setup(24)
        targets = [np.zeros(TOY.patch_len(t.scale)) for t in layout.tokens]
        bad = list(targets)
        bad[int(np.flatnonzero(plan.masked)[0])] = np.zeros(3)
        with pytest.raises(ShapeMismatchError):
            scale_aware_loss(bad, targets, layout, plan)


class TestForwardLoss:
    def test_constant_volume_constant_heads_zero_loss(self):
        cfg = ModelConfig.toy_profile(enc_depth=0, dec_depth=0)
        params = init_model_params(cfg, seed=0, dtype=np.float64)
        layout = gradcheck_layout(cfg)
        h, w, d, t = layout.volume_dims
        c = 2.25
        vol = Volume4D(np.full((t, d, w, h), c))
        for s in range(cfg.num_scales):
            params.arrays[f"psi.{s}.W"][:] = 0.0
            params.arrays[f"psi.{s}.b"][:] = c
        plan = sample_mask(layout, 0.75, seed=0)
        rep = forward_loss(params, vol, layout, plan)
        assert rep.total == 0.0

    def test_bit_identical_reruns(self):
        params, vol, layout, plan = toy_setup(25, dtype=np.float32)
        a = forward_loss(params, vol, layout, plan)
        b = forward_loss(params, vol, layout, plan)
        assert a.total == b.total
        assert a.per_scale == b.per_scale

    def test_report_consistency(self):
        params, vol, layout, plan = toy_setup(26)
        rep = forward_loss(params, vol, layout, plan)
        assert rep.total == pytest.approx(sum(rep.per_scale), rel=1e-12)
        assert rep.voxel_volumes == tuple(TOY.voxel_volume(s) for s in range(TOY.num_scales))
        assert sum(rep.masked_counts) == plan.num_masked


class TestBackward:
    def test_zero_targets_zero_heads_give_zero_head_grads(self):
        cfg = TOY
        params = init_model_params(cfg, seed=27, dtype=np.float64)
        layout = gradcheck_layout(cfg)
        h, w, d, t = layout.volume_dims
        vol = Volume4D(np.zeros((t, d, w, h)))
        for s in range(cfg.num_scales):
            params.arrays[f"psi.{s}.W"][:] = 0.0
            params.arrays[f"psi.{s}.b"][:] = 0.0
        plan = sample_mask(layout, 0.75, seed=0)
        rep, tape = forward_loss(params, vol, layout, plan, with_tape=True)
        assert rep.total == 0.0
        grads = backward(params, tape)
        for s in range(cfg.num_scales):
            assert not grads[f"psi.{s}.W"].any()
            assert not grads[f"psi.{s}.b"].any()

    def test_zero_mlp_final_layer_grad_nonzero_at_init(self):
        params, vol, layout, _ = toy_setup(28)
        # plan with at least one coarse token visible so the residual
        # branch participates in the forward pass
        masked = np.array([t.scale == 0 for t in layout.tokens])
        from voxmae.tokenizer import MaskPlan

        plan = MaskPlan(masked, float(masked.mean()), 0)
        _, tape = forward_loss(params, vol, layout, plan, with_tape=True)
        grads = backward(params, tape)
        assert not params["zero_mlp.W2"].any()
        assert np.abs(grads["zero_mlp.W2"]).max() > 0.0

    def test_grad_keys_match_params(self):
        params, vol, layout, plan = toy_setup(29)
        _, tape = forward_loss(params, vol, layout, plan, with_tape=True)
        grads = backward(params, tape)
        assert set(grads) == set(params.arrays)
        for k in grads:
            assert grads[k].shape == params.arrays[k].shape


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        params = init_model_params(TOY, seed=30, dtype=np.float32)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert back.config == params.config
        for k in params.arrays:
            np.testing.assert_array_equal(back.arrays[k], params.arrays[k])

    def test_version_byte_first(self, tmp_path):
        params = init_model_params(TOY, seed=31)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(params, path)
        raw = path.read_bytes()
        assert raw[0] == 1
        import json
        import struct

        (mlen,) = struct.unpack_from("<I", raw, 1)
        manifest = json.loads(raw[5:5 + mlen])
        assert manifest["config"]["embed_dim"] == TOY.embed_dim
        assert all({"name", "shape", "offset"} <= set(e) for e in manifest["arrays"])

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x07junk")
        with pytest.raises(ValueError):
            load_checkpoint(path)
