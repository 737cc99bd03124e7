import numpy as np
import pytest

from pylonloc import tensor_ops as T
from pylonloc.errors import ConfigurationError, DimensionError
from pylonloc.models import (VARIANTS, EncoderConfig, PAModule, PylonConfig, UPModule, build_variant, cam_extract,
                             load_model, pyramid_levels, read_checkpoint, save_model, write_checkpoint)
from pylonloc.models.layers import Module
from pylonloc.training import evaluate_loss
from pylonloc.data import SyntheticConfig, render_synthetic

SMALL = PylonConfig(decoder_channels=16, norm_groups=4)


def small(kind, input_size=64, **kw):
    return build_variant(kind, EncoderConfig(input_size=input_size), SMALL, **kw)


@pytest.mark.parametrize("kind", VARIANTS)
def test_logits_are_heatmap_max_and_channel_count(kind, rng):
    model = small(kind)
    model.eval()
    out = model(rng.normal(size=(3, 1, 64, 64)))
    assert out.heatmap.shape[:2] == (3, 2)
    np.testing.assert_array_equal(out.logits.data, out.heatmap.data.max(axis=(2, 3)))


@pytest.mark.parametrize("kind,size", [("backbone", 8), ("pylon", 64), ("pylon_1up", 16), ("pylon_2up", 32)])
def test_heatmap_sizes_at_256(kind, size, rng):
    model = small(kind, input_size=256)
    model.eval()
    assert model(rng.normal(size=(1, 1, 256, 256))).heatmap.shape[-2:] == (size, size)
    assert model.heatmap_size == size


def test_heatmap_size_rule_at_desk_scale():
    for n_up in (1, 2, 3):
        model = build_variant("pylon", pylon_cfg=PylonConfig(decoder_channels=8, norm_groups=4, n_up=n_up))
        assert model.heatmap_size == 64 // 32 * 2**n_up


def test_gap_node_counts(rng):
    x = rng.normal(size=(2, 1, 64, 64))
    for kind, expected in [("decoder_gap", 1), ("pylon", 0), ("backbone", 0), ("pylon_att", 3)]:
        model = small(kind)
        model.eval()
        assert T.count_ops(model(x).heatmap, "global_avg_pool") == expected, kind


def test_wrong_input_size(rng):
    with pytest.raises(DimensionError):
        small("pylon")(rng.normal(size=(1, 1, 32, 32)))


def test_unknown_variant():
    with pytest.raises(ConfigurationError, match="pylon_no_pa"):
        build_variant("resnet")


def test_forward_is_deterministic(rng):
    model = small("pylon")
    model.eval()
    x = rng.normal(size=(2, 1, 64, 64))
    assert model(x).heatmap.data.tobytes() == model(x).heatmap.data.tobytes()
    twin = small("pylon")
    twin.eval()
    assert twin(x).heatmap.data.tobytes() == model(x).heatmap.data.tobytes()


def test_final_classifier_has_no_norm_or_activation(rng):
    model = small("pylon")
    model.eval()
    heat = model(rng.normal(size=(1, 1, 64, 64))).heatmap
    assert heat.op == "conv2d"
    assert np.all(model.classifier.bias.data == 0)
    assert model.classifier.weight.data.std() < 0.02
    assert (heat.data < 0).any()


def test_decoder_parameter_count_independent_of_input_size():
    counts = {s: build_variant("pylon", EncoderConfig(input_size=s), SMALL).decoder_parameter_count()
              for s in (256, 512, 1024)}
    assert len(set(counts.values())) == 1


def test_small_inputs_only_drop_pyramid_levels():
    # below 256 the pyramid auto-reduces; the difference is exactly the dropped levels
    full = dict(build_variant("pylon", EncoderConfig(input_size=256), SMALL).named_parameters())
    desk = dict(build_variant("pylon", EncoderConfig(input_size=64), SMALL).named_parameters())
    assert set(desk) < set(full)
    assert all(n.startswith(("pa.down", "pa.refine")) for n in set(full) - set(desk))


def test_variants_differ_structurally():
    names = {k: set(dict(small(k).named_parameters())) for k in VARIANTS}
    assert not any(n.startswith(("pa.", "up")) for n in names["backbone"])
    assert any(n.startswith("pa.gap_conv") for n in names["decoder_gap"])
    assert any("att_conv" in n for n in names["pylon_att"])
    assert not any(n.startswith("up3") for n in names["pylon_2up"])
    assert not any(n.startswith("pa.down") for n in names["pylon_no_pa"])
    gn = small("decoder_groupnorm")
    assert type(gn.up1.lateral.norm).__name__ == "GroupNorm"
    assert type(gn.encoder.stem.norm).__name__ == "BatchNorm2d"


# ---------------------------------------------------------------- modules


def test_pyramid_levels():
    assert [pyramid_levels(s) for s in (8, 4, 2, 16, 1)] == [3, 2, 1, 3, 0]


def test_pa_shape_and_zeroed_pyramid(rng):
    pa = PAModule(8, 16, 8, rng, n_groups=4, dtype=np.float64)
    pa.eval()
    x = T.Tensor(rng.normal(size=(2, 8, 8, 8)))
    assert pa(x).shape == (2, 16, 8, 8)
    for name, p in pa.named_parameters():
        if name.startswith(("down", "refine")) and name.endswith("conv.weight"):
            p.data[...] = 0.0
    assert np.all(pa(x).data == 0.0)


def test_pa_rejects_tiny_maps(rng):
    with pytest.raises(ConfigurationError):
        PAModule(4, 4, 1, rng)


def test_up_module_additive_wiring(rng):
    up = UPModule(8, 4, rng, n_groups=2, dtype=np.float64)
    up.eval()
    low = T.Tensor(rng.normal(size=(1, 8, 8, 8)))
    zero_high = T.Tensor(np.zeros((1, 4, 4, 4)))
    out = up(low, zero_high)
    assert out.shape == (1, 4, 8, 8)
    np.testing.assert_array_equal(out.data, up.lateral(low).data)
    with pytest.raises(DimensionError):
        up(low, T.Tensor(np.zeros((1, 4, 3, 3))))


# ---------------------------------------------------------------- CAMs


def test_cam_extract(rng):
    model = small("pylon")
    model.eval()
    out = model(rng.normal(size=(2, 1, 64, 64)))
    same = cam_extract(out, 1, (16, 16))
    np.testing.assert_array_equal(same, out.heatmap.data[:, 1])
    big = cam_extract(out, 0, (64, 64))
    ref = T.bilinear_upsample(T.Tensor(out.heatmap.data[:, :1]), size=(64, 64)).data[:, 0]
    np.testing.assert_array_equal(big, ref)
    with pytest.raises(IndexError):
        cam_extract(out, 2, (64, 64))


def test_constant_heatmap_gives_constant_cam():
    from pylonloc.models import ModelOutput
    out = ModelOutput(T.Tensor(np.zeros((1, 1))), T.Tensor(np.full((1, 1, 4, 4), 3.0)))
    np.testing.assert_allclose(cam_extract(out, 0, (16, 16)), 3.0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_reproduces_val_loss_bit_exactly(tmp_path):
    model = small("pylon", seed=3)
    data = render_synthetic(SyntheticConfig(n_images=20, seed=1))
    # perturb running stats so they are not the defaults
    model.train()
    model(data.images[:8])
    loss = evaluate_loss(model, data)
    save_model(model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert evaluate_loss(back, data) == loss
    assert back.config_dict() == model.config_dict()


def test_checkpoint_layout(tmp_path):
    tensors = {"b": np.arange(3, dtype=np.int64), "a": np.ones((2, 2), np.float32)}
    write_checkpoint(tmp_path / "x.ckpt", {"k": 1}, tensors)
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:4] == b"PYLN" and int.from_bytes(raw[4:8], "little") == 1
    cfg, back = read_checkpoint(tmp_path / "x.ckpt")
    assert cfg == {"k": 1} and list(back) == ["a", "b"]
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and np.array_equal(back[k], tensors[k])


def test_corrupt_checkpoint_is_an_io_error(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(OSError):
        read_checkpoint(tmp_path / "bad.ckpt")


def test_state_dict_mismatch(rng):
    model = small("pylon")
    state = model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(Exception, match="missing"):
        model.load_state_dict(state)


def test_module_registry():
    class M(Module):
        def __init__(self):
            super().__init__()
            self.w = T.Param(np.zeros(2), "w")

    names = [p.name for p in M().parameters()]
    assert names == ["w"]
