import itertools
from dataclasses import fields, replace

import numpy as np
import pytest

from fusion_uie import spectral
from fusion_uie import tensor as T
from fusion_uie.layers import Conv2d
from fusion_uie.model import (ABLATION_LABELS, ABLATION_PRESETS, FGF, NORM_EPS, AblationConfig,
                              FrequencyBranch, FusionModel, NumericalError, SpatialBranch, count_parameters)
from fusion_uie.tensor import Tensor

RNG = np.random.default_rng(31)


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0
    return module


def image(h, w, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(3, h, w))


# -- ablation configuration --------------------------------------------------------

def test_nine_presets_with_labels():
    assert list(ABLATION_PRESETS) == ["full", "no_freq_attn", "no_freq_branch", "no_freq_fusion",
                                      "no_chan_calib", "no_local_attn", "no_global_attn",
                                      "spatial_only", "minimal"]
    assert set(ABLATION_LABELS) == set(ABLATION_PRESETS)
    assert ABLATION_LABELS["minimal"] == "Minimal Model"


def test_freq_attention_requires_branch():
    with pytest.raises(ValueError):
        AblationConfig(freq_attention=True, freq_branch=False)
    with pytest.raises(ValueError):
        AblationConfig.preset("nope")


def test_bitfield_round_trip():
    for cfg in ABLATION_PRESETS.values():
        assert AblationConfig.from_bits(cfg.to_bits()) == cfg


# -- spatial branch ------------------------------------------------------------------

def test_spatial_branch_zero_everything():
    sb = zero_params(SpatialBranch(4, 5, True, RNG))
    assert np.array_equal(sb(Tensor(RNG.uniform(size=(1, 8, 8)))).data, np.zeros((4, 8, 8)))


def test_spatial_branch_without_attention_doubles():
    sb = SpatialBranch(4, 3, False, RNG)
    d = Tensor(RNG.uniform(size=(1, 8, 8)))
    assert np.array_equal(sb(d).data, 2 * sb.conv(d).data)


def test_spatial_branch_composition_bitwise():
    sb = SpatialBranch(4, 7, True, RNG)
    d = Tensor(RNG.uniform(size=(1, 8, 8)))
    f1 = T.conv2d(d, sb.conv.weight, sb.conv.bias)
    f2 = sb.cbam.spatial(sb.cbam.channel(f1))
    assert np.array_equal(sb(d).data, (f2 + f1).data)


def test_model_spatial_branch_rejects_multichannel():
    m = FusionModel("tiny")
    with pytest.raises(T.ShapeError):
        m.spatial_branch(Tensor(np.zeros((2, 8, 8))), "R")


# -- frequency branch ---------------------------------------------------------------

def _copy_stack(fb, mag, hw):
    """Set the 1x1 stack so that channel 0 reproduces ``mag`` (before attention)."""
    zero_params(fb)
    fb.lift.weight.data[0] = 1.0
    fb.act.slope.data[...] = 0.25
    fb.mix.weight.data[0, 0] = 1.0
    # undo the normalization for channel 0, and the sqrt(HW) output gain
    std = np.sqrt(mag.var() + NORM_EPS)
    fb.norm.gamma.data[0] = std / np.sqrt(hw)
    fb.norm.beta.data[0] = mag.mean() / np.sqrt(hw)


def test_frequency_branch_copy_stack_reconstructs_input():
    d = RNG.uniform(size=(1, 9, 8))
    fb = FrequencyBranch(4, False, RNG)
    mag = np.abs(np.fft.fft2(d[0]))
    _copy_stack(fb, mag, d.size)
    out = fb(Tensor(d)).data
    assert np.max(np.abs(out[0] - d[0])) <= 1e-9


def test_frequency_branch_zero_weights_give_zero():
    fb = zero_params(FrequencyBranch(4, False, RNG))
    fb.norm.gamma.data[...] = 1.0
    out = fb(Tensor(RNG.uniform(size=(1, 8, 8)))).data
    assert np.max(np.abs(out)) == 0.0


def test_frequency_attention_zero_params_halves_branch():
    d = Tensor(RNG.uniform(size=(1, 10, 10)))
    with_attn = FrequencyBranch(4, True, np.random.default_rng(5))
    zero_params(with_attn.attention)
    without = FrequencyBranch(4, False, np.random.default_rng(5))
    for (n, p), (_, q) in zip(without.named_parameters(), with_attn.named_parameters()):
        q.data[...] = p.data
    assert np.max(np.abs(with_attn(d).data - 0.5 * without(d).data)) <= 1e-9


def test_frequency_branch_keeps_output_real():
    # ifft2 raises if the residue bound is violated anywhere in the branch
    for seed in range(5):
        fb = FrequencyBranch(4, True, np.random.default_rng(seed))
        fb(Tensor(np.random.default_rng(seed).uniform(size=(1, 13, 11))))


def test_disabled_frequency_branch_rejects_call():
    m = FusionModel("tiny", "no_freq_branch")
    with pytest.raises(RuntimeError):
        m.frequency_branch(Tensor(np.zeros((1, 8, 8))), "G")


# -- FGF ---------------------------------------------------------------------------------

def test_fgf_spatial_identity_selection():
    c = 3
    fgf = FGF(c, True, RNG)
    zero_params(fgf)
    fgf.conv.weight.data[:, :c, 0, 0] = np.eye(c)
    fs, ff = RNG.standard_normal((2, c, 5, 5))
    assert np.array_equal(fgf(Tensor(fs), Tensor(ff)).data, np.maximum(fs, 0))


def test_fgf_zero_inputs_zero_bias():
    fgf = FGF(3, True, RNG)
    fgf.conv.bias.data[...] = 0
    z = Tensor(np.zeros((3, 4, 4)))
    assert np.array_equal(fgf(z, z).data, np.zeros((3, 4, 4)))


def test_fgf_concat_conv_oracle():
    fgf = FGF(3, True, RNG)
    fs, ff = RNG.standard_normal((2, 3, 5, 6))
    stacked = np.concatenate([fs, ff])
    w = fgf.conv.weight.data[:, :, 0, 0]
    ref = np.maximum(np.einsum("oc,chw->ohw", w, stacked) + fgf.conv.bias.data[:, None, None], 0)
    assert np.max(np.abs(fgf(Tensor(fs), Tensor(ff)).data - ref)) <= 1e-12


def test_fgf_shape_mismatch():
    with pytest.raises(T.ShapeError):
        FGF(3, True, RNG)(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 4, 5))))


def test_no_freq_fusion_passes_spatial_through():
    m = FusionModel("tiny", "no_freq_fusion")
    fs = Tensor(RNG.standard_normal((4, 8, 8)))
    assert m.fuse(fs, None, "R") is fs


# -- forward ---------------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(8, 8), (37, 41), (64, 64)])
def test_forward_shape(shape):
    assert FusionModel("tiny")(image(*shape)).shape == (3,) + shape


@pytest.mark.parametrize("preset", list(ABLATION_PRESETS))
@pytest.mark.parametrize("size", [8, 16, 31, 64])
def test_shape_and_range_for_every_preset(preset, size):
    out = FusionModel("tiny", preset, seed=size)(image(size, size, seed=size)).data
    assert out.shape == (3, size, size)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_forward_deterministic_bitwise():
    x = image(16, 16, seed=42)
    a = FusionModel("tiny", seed=42)(x).data
    b = FusionModel("tiny", seed=42)(x).data
    assert a.tobytes() == b.tobytes()


def test_forward_input_validation():
    m = FusionModel("tiny")
    with pytest.raises(T.ShapeError):
        m(np.zeros((1, 8, 8)))
    with pytest.raises(T.ShapeError):
        m(np.zeros((3, 7, 9)))
    with pytest.raises(ValueError):
        m(np.full((3, 8, 8), 1.5))


def test_nan_names_first_stage():
    m = FusionModel("tiny")
    m.expand.weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="expand"):
        m(image(8, 8))


# -- parameters --------------------------------------------------------------------------

def test_single_conv_counts_ten():
    total, _ = count_parameters(Conv2d(1, 1, 3, RNG))
    assert total == 10


def test_paper_preset_budget_and_breakdown():
    total, breakdown = count_parameters(FusionModel("paper"))
    assert 250_000 <= total <= 350_000
    assert sum(breakdown.values()) == total


def test_parameter_names_unique_and_owned():
    names = [n for n, _ in FusionModel("tiny").named_parameters()]
    assert len(names) == len(set(names))
    tops = {"spatial", "frequency", "fgf", "expand", "integrate", "global_attention", "context",
            "decode1", "decode2", "calibration"}
    assert all(n.split(".")[0] in tops for n in names)


def test_minimal_has_fewer_parameters_than_full():
    for width in ("tiny", "paper"):
        full, _ = count_parameters(FusionModel(width, "full"))
        minimal, _ = count_parameters(FusionModel(width, "minimal"))
        assert minimal < full


def _valid_configs():
    for bits in itertools.product([False, True], repeat=6):
        try:
            yield AblationConfig(*bits)
        except ValueError:
            continue


def test_disabling_any_toggle_never_adds_parameters():
    counts = {cfg: count_parameters(FusionModel("tiny", cfg))[0] for cfg in _valid_configs()}
    for cfg, n in counts.items():
        for f in fields(cfg):
            if not getattr(cfg, f.name):
                continue
            off = {f.name: False}
            if f.name == "freq_branch":
                off["freq_attention"] = False
            assert counts[replace(cfg, **off)] <= n, (cfg, f.name)


def test_every_parameter_gets_gradient_on_some_input():
    m = FusionModel("tiny", seed=0)
    rng = np.random.default_rng(100)
    seen = {n: 0.0 for n, _ in m.named_parameters()}
    for _ in range(8):
        x, y = rng.uniform(size=(2, 3, 16, 16))
        m.zero_grad()
        T.backward(T.mean(T.abs_(m(x) - Tensor(y))), m.parameters())
        for n, p in m.named_parameters():
            seen[n] += float(np.abs(p.grad).sum())
    dead = [n for n, v in seen.items() if v == 0.0]
    assert not dead, dead


def test_frequency_branch_output_is_real_through_model():
    # the model forwards through ifft2, which raises on a broken symmetry
    FusionModel("tiny", seed=3)(image(23, 17))
    assert spectral.MAG_EPS == 1e-12
