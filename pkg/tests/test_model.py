import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dcucnet.complex_nn import ComplexTensor
from dcucnet.conformer import ConformerConfig
from dcucnet.dsp import Spectrogram, StftConfig, Waveform, conv_stft
from dcucnet.errors import InvalidInput, ShapeError
from dcucnet.model import (
    DCUCNet,
    ModelConfig,
    apply_mask,
    apply_mask_spectrogram,
    bound_mask,
    enhance,
    identity_mask_model,
    micro_config,
)
from dcucnet.visual import VideoFrames

import oracles
from conftest import to_numpy_state


def ct(z):
    return ComplexTensor(torch.from_numpy(np.ascontiguousarray(z.real)), torch.from_numpy(np.ascontiguousarray(z.imag)))


def to_np(x):
    return x.real.detach().numpy() + 1j * x.imag.detach().numpy()


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def small_config(**kw):
    # 9 frequency bins, three encoder blocks: fast enough for loop oracles
    base = dict(
        stft=StftConfig(win_length=12, hop_length=4, fft_length=16),
        encoder_channels=(2, 3, 3),
        conformer=ConformerConfig(model_dim=8, num_heads=2, ffn_expansion=2, conv_kernel=3, num_blocks=1),
        visual_embed_dim=4, visual_channels=(2,), frame_size=(8, 8), fps=4000.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def randomize(model, seed, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


# -- numpy composition of the kernel oracles --------------------------------------------

def oracle_encoder_block(x, p, kernel, stride):
    kh, kw = kernel
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw - 1, 0)))
    w = p["conv.w_real"] + 1j * p["conv.w_imag"]
    b = p["conv.b_real"] + 1j * p["conv.b_imag"]
    h = oracles.naive_complex_conv2d(xp, w, b, stride, (0, 0))
    return oracle_bn_prelu(h, p)


def oracle_bn_prelu(h, p):
    gam = np.stack([np.stack([p["bn.gamma_rr"], p["bn.gamma_ri"]], -1),
                    np.stack([p["bn.gamma_ri"], p["bn.gamma_ii"]], -1)], -2)
    bet = np.stack([p["bn.beta_r"], p["bn.beta_i"]], -1)
    h = oracles.eig_whiten(h, gam, bet)
    s = p["act.slope"]
    return oracles.elementwise_prelu(h.real, s) + 1j * oracles.elementwise_prelu(h.imag, s)


def sub(state, prefix):
    return {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}


class TestEncode:
    def test_zero_input(self):
        model = DCUCNet(small_config()).double()
        z = np.zeros((2, 1, 9, 6), dtype=complex)
        latent, skips = model.encode(ct(z))
        assert not latent.real.any() and not latent.imag.any()
        assert all(not s.real.any() and not s.imag.any() for s in skips)

    def test_default_shape_arithmetic(self):
        cfg = ModelConfig()
        sizes = [257]
        for _ in range(5):
            sizes.append(-(-sizes[-1] // 2))  # ceil division
        assert cfg.freq_sizes() == sizes
        assert sizes[-1] == 9
        model = DCUCNet(cfg).eval()
        latent, skips = model.encode(ComplexTensor(torch.randn(1, 1, 257, 13), torch.randn(1, 1, 257, 13)))
        assert latent.shape == (1, 64, 9, 13)
        assert [s.shape[2] for s in skips] == sizes[1:]

    def test_composed_oracle(self, rng):
        cfg = small_config()
        model = randomize(DCUCNet(cfg).double(), 1)
        x = crandn(rng, 2, 1, 9, 5)
        latent, skips = model.encode(ct(x))
        state = to_numpy_state(model)
        h = x
        for i in range(3):
            h = oracle_encoder_block(h, sub(state, f"encoder.{i}"), cfg.kernel, cfg.stride)
            np.testing.assert_allclose(to_np(skips[i]), h, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(to_np(latent), h, rtol=1e-5, atol=1e-5)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            DCUCNet(small_config()).encode(ComplexTensor(torch.zeros(1, 1, 8, 3), torch.zeros(1, 1, 8, 3)))


class TestFuse:
    def test_identity_path(self, rng):
        cfg = ModelConfig(conformer=ConformerConfig(model_dim=576, num_heads=4, conv_kernel=3, num_blocks=2))
        model = DCUCNet(cfg).double()
        with torch.no_grad():
            model.fuse_in.weight.zero_()
            model.fuse_in.weight[:, :576] = torch.eye(576)
            model.fuse_in.bias.zero_()
            model.fuse_out.weight.copy_(torch.eye(576))
            model.fuse_out.bias.zero_()
        for block in model.conformer.blocks:
            block.zero_branches()
        latent = ct(crandn(rng, 1, 64, 9, 6))
        visual = torch.from_numpy(rng.standard_normal((1, 6, 32)))
        out = model.fuse(latent, visual)
        flat = latent.real.permute(0, 3, 1, 2).reshape(1, 6, 576)
        ln = flat
        for block in model.conformer.blocks:
            ln = block.norm(ln)
        expected = ln.reshape(1, 6, 64, 9).permute(0, 2, 3, 1)
        np.testing.assert_allclose(out.real.detach().numpy(), expected.detach().numpy(), atol=1e-12)
        assert torch.equal(out.imag, latent.imag)

    def test_visual_contribution_is_linear(self, rng):
        cfg = small_config()
        model = randomize(DCUCNet(cfg).double(), 2)
        with torch.no_grad():
            model.fuse_in.weight[:, : cfg.latent_features] = 0.0
        latent = ct(crandn(rng, 1, 3, 2, 4))
        zeros = torch.zeros(1, 4, 4, dtype=torch.float64)
        ones = torch.ones(1, 4, 4, dtype=torch.float64)
        h0 = model.fuse_in(torch.cat([latent.real.permute(0, 3, 1, 2).reshape(1, 4, 6), zeros], -1))
        h1 = model.fuse_in(torch.cat([latent.real.permute(0, 3, 1, 2).reshape(1, 4, 6), ones], -1))
        # with audio columns zeroed the projection sees only the visual columns
        delta = model.fuse_in.weight[:, cfg.latent_features:].sum(1)
        np.testing.assert_allclose((h1 - h0).detach().numpy(), delta.detach().expand(1, 4, -1).numpy(), atol=1e-12)
        out0 = model.fuse(latent, zeros)
        latent2 = ct(crandn(rng, 1, 3, 2, 4))
        out0b = model.fuse(ComplexTensor(latent2.real, latent.imag), zeros)
        # audio features no longer reach the conformer
        np.testing.assert_allclose(out0.real.detach().numpy(), out0b.real.detach().numpy(), atol=1e-12)
        assert not torch.allclose(model.fuse(latent, ones).real, out0.real)

    def test_composed_oracle(self, rng):
        cfg = ModelConfig()
        model = randomize(DCUCNet(cfg).double(), 3, scale=0.05)
        latent = ct(crandn(rng, 1, 64, 9, 20))
        visual = torch.from_numpy(rng.standard_normal((1, 20, 32)))
        out = model.fuse(latent, visual)
        st = to_numpy_state(model)
        flat = np.transpose(latent.real.numpy(), (0, 3, 1, 2)).reshape(1, 20, 576)
        h = oracles.dense(np.concatenate([flat, visual.numpy()], -1), st["fuse_in.weight"], st["fuse_in.bias"])
        for i in range(cfg.conformer.num_blocks):
            h = oracles.conformer_block(h, sub(st, f"conformer.blocks.{i}"), 4, 15)
        h = oracles.dense(h, st["fuse_out.weight"], st["fuse_out.bias"])
        ref = np.transpose(h.reshape(1, 20, 64, 9), (0, 2, 3, 1))
        np.testing.assert_allclose(out.real.detach().numpy(), ref, rtol=1e-5, atol=1e-5)

    def test_time_mismatch(self, rng):
        model = DCUCNet(small_config()).double()
        with pytest.raises(InvalidInput):
            model.fuse(ct(crandn(rng, 1, 3, 2, 4)), torch.zeros(1, 3, 4, dtype=torch.float64))


class TestDecode:
    def test_zero_weights_zero_mask(self, rng):
        model = DCUCNet(small_config()).double()
        with torch.no_grad():
            for blk in model.decoder:
                blk.conv.w_real.zero_()
                blk.conv.w_imag.zero_()
        latent, skips = model.encode(ct(crandn(rng, 1, 1, 9, 4)))
        mask = model.decode(latent, skips)
        assert not mask.real.any() and not mask.imag.any()

    @pytest.mark.parametrize("frames", [1, 7, 30])
    def test_output_shape_default(self, frames):
        model = DCUCNet(ModelConfig()).eval()
        spec = ComplexTensor(torch.randn(1, 1, 257, frames), torch.randn(1, 1, 257, frames))
        latent, skips = model.encode(spec)
        assert model.decode(latent, skips).shape == (1, 1, 257, frames)

    def test_composed_oracle(self, rng):
        cfg = small_config(mask_bound=None)
        model = randomize(DCUCNet(cfg).double(), 4)
        fused = crandn(rng, 2, 3, 2, 4)
        skips_np = [crandn(rng, 2, 2, 5, 4), crandn(rng, 2, 3, 3, 4), crandn(rng, 2, 3, 2, 4)]
        mask = to_np(model.decode(ct(fused), [ct(s) for s in skips_np]))
        st = to_numpy_state(model)
        sizes = cfg.freq_sizes()
        h = fused
        for i in range(3):
            p = sub(st, f"decoder.{i}")
            x = np.concatenate([h, skips_np[-1 - i]], axis=1)
            w = p["conv.w_real"] + 1j * p["conv.w_imag"]
            b = p["conv.b_real"] + 1j * p["conv.b_imag"]
            y = oracles.zero_insert_conv_transpose2d(x, w, b, (2, 1), (2, 0))[..., : x.shape[-1]]
            f = sizes[-2 - i]
            y = y[:, :, :f] if y.shape[2] >= f else np.pad(y, ((0, 0), (0, 0), (0, f - y.shape[2]), (0, 0)))
            h = y if i == 2 else oracle_bn_prelu(y, p)
        np.testing.assert_allclose(mask, h, rtol=1e-5, atol=1e-5)

    def test_skip_mismatch(self, rng):
        model = DCUCNet(small_config()).double()
        latent, skips = model.encode(ct(crandn(rng, 1, 1, 9, 4)))
        with pytest.raises(ShapeError):
            model.decode(latent, skips[:-1])
        with pytest.raises(ShapeError):
            model.decode(latent, [skips[0], skips[1], ct(crandn(rng, 1, 3, 3, 4))])


class TestMask:
    def test_identity_and_zero(self, rng):
        x = ct(crandn(rng, 1, 1, 9, 4))
        one = ComplexTensor(torch.ones_like(x.real), torch.zeros_like(x.real))
        zero = ComplexTensor(torch.zeros_like(x.real), torch.zeros_like(x.real))
        assert torch.equal(apply_mask(x, one).real, x.real) and torch.equal(apply_mask(x, one).imag, x.imag)
        out = apply_mask(x, zero)
        assert not out.real.any() and not out.imag.any()

    def test_scalar_oracle(self, rng):
        x, m = crandn(rng, 1, 1, 9, 4), crandn(rng, 1, 1, 9, 4)
        out = to_np(apply_mask(ct(x), ct(m)))
        ref = np.empty_like(x)
        for idx in np.ndindex(x.shape):
            a, b, c, d = x[idx].real, x[idx].imag, m[idx].real, m[idx].imag
            ref[idx] = complex(a * c - b * d, a * d + b * c)
        assert np.array_equal(out, ref)

    def test_spectrogram_helper(self, rng):
        s = conv_stft(Waveform(rng.standard_normal(1000)))
        assert np.array_equal(apply_mask_spectrogram(s, np.ones_like(s.data)).data, s.data)
        with pytest.raises(ShapeError):
            apply_mask_spectrogram(s, np.ones((3, 3)))
        with pytest.raises(ShapeError):
            apply_mask(ct(crandn(rng, 1, 1, 9, 4)), ct(crandn(rng, 1, 1, 9, 5)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 100.0), bound=st.floats(0.5, 4.0))
    def test_bound_property(self, seed, scale, bound):
        m = ct(crandn(np.random.default_rng(seed), 1, 1, 9, 6) * scale)
        out = bound_mask(m, bound)
        assert float(out.abs().max()) <= bound
        # phase is preserved
        np.testing.assert_allclose(np.angle(to_np(out)), np.angle(to_np(m)), atol=1e-9)

    def test_bound_of_zero_is_zero(self):
        z = ComplexTensor(torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 3, 3))
        out = bound_mask(z, 1.0)
        assert not out.real.any() and not out.imag.any()


def test_mask_bound_holds_end_to_end(rng):
    model = randomize(DCUCNet(small_config()).double(), 5, scale=3.0)
    spec = ct(crandn(rng, 2, 1, 9, 7) * 10)
    with torch.no_grad():
        mask = model.estimate_mask(spec, torch.zeros(2, 2, 8, 8, dtype=torch.uint8))
    assert float(mask.abs().max()) <= 1.0


class TestEnhance:
    def test_identity_mask_roundtrip(self, rng):
        model = identity_mask_model().double()
        x = Waveform(rng.uniform(-0.5, 0.5, 32000))
        video = VideoFrames(rng.integers(0, 256, (50, 32, 32), dtype=np.uint8))
        y = enhance(x, video, model)
        assert len(y) == len(x)
        assert np.max(np.abs(y.samples - x.samples)) <= 1e-6

    def test_zero_in_zero_out(self):
        model = DCUCNet(ModelConfig()).double()
        y = enhance(Waveform(np.zeros(8000)), VideoFrames(np.zeros((13, 32, 32), np.uint8)), model)
        assert len(y) == 8000 and not np.any(y.samples)

    def test_deterministic(self, rng):
        x = Waveform(rng.uniform(-0.5, 0.5, 8000))
        video = VideoFrames(rng.integers(0, 256, (12, 32, 32), dtype=np.uint8))
        a = enhance(x, video, DCUCNet(ModelConfig(seed=3)))
        b = enhance(x, video, DCUCNet(ModelConfig(seed=3)))
        assert np.array_equal(a.samples, b.samples)
        c = enhance(x, video, DCUCNet(ModelConfig(seed=4)))
        assert not np.array_equal(a.samples, c.samples)

    def test_duration_mismatch(self, rng):
        with pytest.raises(InvalidInput):
            enhance(Waveform(np.zeros(32000)), VideoFrames(np.zeros((40, 32, 32), np.uint8)), DCUCNet())

    def test_audio_only_ignores_video(self, rng):
        cfg = dataclasses.replace(micro_config(), use_visual=False)
        model = randomize(DCUCNet(cfg).double(), 6).eval()
        x = torch.from_numpy(rng.standard_normal((1, 40)))
        a = model(x, torch.zeros(1, 1, 8, 8, dtype=torch.uint8))
        b = model(x, torch.full((1, 1, 8, 8), 255, dtype=torch.uint8))
        assert torch.equal(a, b)


def test_seeded_initialisation_is_isolated():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    DCUCNet(micro_config(seed=9))
    assert torch.equal(torch.rand(1), before)
    a = DCUCNet(micro_config(seed=9)).state_dict()
    b = DCUCNet(micro_config(seed=9)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


@settings(max_examples=15, deadline=None)
@given(frames=st.integers(1, 50))
def test_encode_decode_symmetry(frames):
    model = DCUCNet(ModelConfig()).eval()
    spec = ComplexTensor(torch.randn(1, 1, 257, frames), torch.randn(1, 1, 257, frames))
    with torch.no_grad():
        mask = model.estimate_mask(spec, torch.zeros(1, 1, 32, 32, dtype=torch.uint8))
    assert mask.shape == spec.shape
