"""Mini-encoder, PYLON decoder (PA + UP), the Backbone baseline and ablation variants.

Every model maps images (n, in_channels, S, S) to a :class:`ModelOutput`: a
per-class heatmap and logits obtained by global max pooling it, so the heatmap
is the class-activation map by construction.
"""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .. import tensor_ops as T
from ..errors import ConfigurationError, DimensionError
from ..seeding import stream
from .layers import Conv2d, ConvNormAct, Module

VARIANTS = (
    "backbone",
    "pylon",
    "pylon_no_pa",
    "pylon_att",
    "pylon_1up",
    "pylon_2up",
    "decoder_gap",
    "decoder_groupnorm",
)
INJECT_GAP = ("none", "pa_branch", "up_attention")
PYRAMID_KERNELS = (7, 5, 3)


@dataclass
class EncoderConfig:
    in_channels: int = 1
    stage_channels: Tuple[int, int, int, int] = (16, 32, 64, 128)
    input_size: int = 64

    def validate(self) -> None:
        if self.input_size % 32:
            raise ConfigurationError(f"input_size must be divisible by 32, got {self.input_size}")
        if len(self.stage_channels) != 4:
            raise ConfigurationError("stage_channels needs exactly 4 entries")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigurationError("stage_channels must be non-decreasing")
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")


@dataclass
class PylonConfig:
    n_classes: int = 2
    decoder_channels: int = 128
    n_up: int = 3
    up_conv: str = "1x1"
    norm: str = "batch"
    norm_groups: int = 32
    inject_gap: str = "none"
    use_pa: bool = True

    def validate(self) -> None:
        if self.n_up not in (1, 2, 3):
            raise ConfigurationError(f"n_up must be 1, 2 or 3, got {self.n_up}")
        if self.up_conv not in ("1x1", "3x3"):
            raise ConfigurationError(f"up_conv must be '1x1' or '3x3', got {self.up_conv!r}")
        if self.norm not in ("batch", "group"):
            raise ConfigurationError(f"norm must be 'batch' or 'group', got {self.norm!r}")
        if self.norm == "group" and self.decoder_channels % self.norm_groups:
            raise ConfigurationError("norm_groups must divide decoder_channels")
        if self.inject_gap not in INJECT_GAP:
            raise ConfigurationError(f"inject_gap must be one of {INJECT_GAP}")
        if self.n_classes < 1:
            raise ConfigurationError("n_classes must be >= 1")


@dataclass
class ModelOutput:
    logits: T.Tensor
    heatmap: T.Tensor
    nodes: Dict[str, T.Tensor] = field(default_factory=OrderedDict)


def _upsample2x(x: T.Tensor, pad_mode: str) -> T.Tensor:
    return T.bilinear_upsample(x, scale=2, boundary="circular" if pad_mode == "circular" else "clamp")


def _broadcast_pooled(pooled: T.Tensor) -> T.Tensor:
    n, c = pooled.shape
    return T.reshape(pooled, (n, c, 1, 1))


class Encoder(Module):
    """Stem (7x7 stride-2 conv + 2x2 max pool) followed by three stride-2 stages of two 3x3 blocks.

    Returns feature maps at strides 4, 8, 16 and 32.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, pad_mode: str = "zeros", dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.stage_channels
        kw = dict(pad_mode=pad_mode, dtype=dtype)
        self.stem = ConvNormAct(cfg.in_channels, ch[0], 7, rng, stride=2, **kw)
        for i in range(1, 4):
            setattr(self, f"stage{i + 1}a", ConvNormAct(ch[i - 1], ch[i], 3, rng, stride=2, **kw))
            setattr(self, f"stage{i + 1}b", ConvNormAct(ch[i], ch[i], 3, rng, **kw))

    def __call__(self, x: T.Tensor) -> List[T.Tensor]:
        feats = [T.max_pool2d(self.stem(x))]
        for i in range(2, 5):
            y = getattr(self, f"stage{i}a")(feats[-1])
            feats.append(getattr(self, f"stage{i}b")(y))
        return feats


def pyramid_levels(spatial: int) -> int:
    """Number of 2x max-pool levels a ``spatial``-sized map supports, capped at 3.

    Equals floor(log2(spatial)) for power-of-two sizes (8 -> 3, 2 -> 1).
    """
    levels = 0
    while levels < 3 and spatial >= 2 and spatial % 2 == 0:
        spatial //= 2
        levels += 1
    return levels


class PAModule(Module):
    """Feature-pyramid attention without its global-average branch.

    ``out = main(x) * pyramid(x)`` where ``main`` is a 1x1 conv block and the
    pyramid is a single-channel chain of max-pool / conv (7x7, 5x5, 3x3) steps
    merged back by bilinear 2x upsampling and addition. The pyramid depth
    shrinks automatically for tiny inputs. ``with_gap=True`` re-adds the
    global-average branch (summed onto the output) for the GAP ablation.
    """

    def __init__(self, c_in: int, c_out: int, spatial: int, rng: np.random.Generator, norm: str = "batch",
                 n_groups: int = 32, with_gap: bool = False, pad_mode: str = "zeros", dtype=np.float32):
        super().__init__()
        self.levels = pyramid_levels(spatial)
        if self.levels < 1:
            raise ConfigurationError(f"PA module needs a deepest map of at least 2x2, got {spatial}")
        self.pad_mode = pad_mode
        kw = dict(norm=norm, n_groups=n_groups, pad_mode=pad_mode, dtype=dtype)
        self.main = ConvNormAct(c_in, c_out, 1, rng, **kw)
        for i in range(self.levels):
            k = PYRAMID_KERNELS[i]
            setattr(self, f"down{i + 1}", ConvNormAct(c_in if i == 0 else 1, 1, k, rng, **kw))
            # deepest level gets a second conv; shallower levels get a refinement conv on the skip
            setattr(self, f"refine{i + 1}", ConvNormAct(1, 1, k, rng, **kw))
        self.with_gap = with_gap
        if with_gap:
            self.gap_conv = ConvNormAct(c_in, c_out, 1, rng, **kw)

    def __call__(self, x: T.Tensor, nodes: Optional[dict] = None, prefix: str = "pa") -> T.Tensor:
        main = self.main(x)
        downs = []
        y = x
        for i in range(self.levels):
            y = getattr(self, f"down{i + 1}")(T.max_pool2d(y))
            downs.append(y)
        y = getattr(self, f"refine{self.levels}")(downs[-1])
        for i in range(self.levels - 2, -1, -1):
            y = T.add(_upsample2x(y, self.pad_mode), getattr(self, f"refine{i + 1}")(downs[i]))
        multiplier = _upsample2x(y, self.pad_mode)
        out = T.mul(main, multiplier)
        if self.with_gap:
            pooled = T.global_avg_pool(x)
            if nodes is not None:
                nodes[f"{prefix}.gap"] = pooled
            out = T.add(out, self.gap_conv(_broadcast_pooled(pooled)))
        return out


class UPModule(Module):
    """Lateral conv block on the finer map plus bilinear 2x of the coarser decoder map.

    With ``attention=True`` the lateral path is scaled per channel by
    ``sigmoid(conv1x1(GAP(high)))``, the channel attention of GAU.
    """

    def __init__(self, c_low: int, c_out: int, rng: np.random.Generator, up_conv: str = "1x1",
                 norm: str = "batch", n_groups: int = 32, attention: bool = False,
                 pad_mode: str = "zeros", dtype=np.float32):
        super().__init__()
        k = 1 if up_conv == "1x1" else 3
        self.lateral = ConvNormAct(c_low, c_out, k, rng, norm=norm, n_groups=n_groups, pad_mode=pad_mode, dtype=dtype)
        self.attention = attention
        if attention:
            self.att_conv = Conv2d(c_out, c_out, 1, rng, pad_mode=pad_mode, dtype=dtype)
        self.pad_mode = pad_mode

    def __call__(self, low: T.Tensor, high: T.Tensor, nodes: Optional[dict] = None, prefix: str = "up") -> T.Tensor:
        if low.ndim != 4 or high.ndim != 4 or low.shape[2:] != (2 * high.shape[2], 2 * high.shape[3]):
            raise DimensionError(f"UP module: low {low.shape} must be twice the spatial size of high {high.shape}")
        lateral = self.lateral(low)
        if self.attention:
            pooled = T.global_avg_pool(high)
            if nodes is not None:
                nodes[f"{prefix}.gap"] = pooled
            lateral = T.mul(lateral, T.sigmoid(self.att_conv(_broadcast_pooled(pooled))))
        return T.add(lateral, _upsample2x(high, self.pad_mode))


def _classifier(c_in: int, n_classes: int, rng: np.random.Generator, pad_mode: str, dtype) -> Conv2d:
    # small weights, zero bias: heatmaps start near zero
    return Conv2d(c_in, n_classes, 1, rng, pad_mode=pad_mode, dtype=dtype, init_std=0.01)


class CAMNet(Module):
    """Base for all variants: subclasses implement :meth:`heatmap`."""

    kind = "base"

    def __init__(self, enc_cfg: EncoderConfig, pylon_cfg: PylonConfig, seed: int,
                 pad_mode: str = "zeros", dtype=np.float32):
        super().__init__()
        if pad_mode not in T.functional.PAD_MODES:
            raise ConfigurationError(f"pad_mode must be one of {T.functional.PAD_MODES}")
        enc_cfg.validate()
        pylon_cfg.validate()
        self.enc_cfg = enc_cfg
        self.pylon_cfg = pylon_cfg
        self.seed = seed
        self.pad_mode = pad_mode
        self.dtype = np.dtype(dtype)

    @property
    def output_stride(self) -> int:
        raise NotImplementedError

    @property
    def heatmap_size(self) -> int:
        return self.enc_cfg.input_size // self.output_stride

    def heatmap(self, x: T.Tensor, nodes: dict) -> T.Tensor:
        raise NotImplementedError

    def __call__(self, images, record: bool = False) -> ModelOutput:
        return forward(self, images, record=record)

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "encoder": dataclasses.asdict(self.enc_cfg),
            "pylon": dataclasses.asdict(self.pylon_cfg),
            "seed": self.seed,
            "pad_mode": self.pad_mode,
            "dtype": self.dtype.name,
        }

    def decoder_parameter_count(self) -> int:
        return sum(p.data.size for name, p in self.named_parameters() if not name.startswith("encoder."))


class BackboneNet(CAMNet):
    kind = "backbone"

    def __init__(self, enc_cfg, pylon_cfg, seed, pad_mode="zeros", dtype=np.float32):
        super().__init__(enc_cfg, pylon_cfg, seed, pad_mode, dtype)
        rng = stream(seed, "init")
        self.encoder = Encoder(enc_cfg, rng, pad_mode, dtype)
        self.classifier = _classifier(enc_cfg.stage_channels[3], pylon_cfg.n_classes, rng, pad_mode, dtype)

    @property
    def output_stride(self) -> int:
        return 32

    def heatmap(self, x, nodes):
        feats = self.encoder(x)
        for i, f in enumerate(feats):
            nodes[f"encoder.stage{i + 1}"] = f
        return self.classifier(feats[-1])


class PylonNet(CAMNet):
    """Encoder + PA (or its 1x1 replacement) + ``n_up`` UP modules + 1x1 classifier."""

    kind = "pylon"

    def __init__(self, enc_cfg, pylon_cfg, seed, pad_mode="zeros", dtype=np.float32, kind: str = "pylon"):
        super().__init__(enc_cfg, pylon_cfg, seed, pad_mode, dtype)
        self.kind = kind
        rng = stream(seed, "init")
        cfg = pylon_cfg
        ch = enc_cfg.stage_channels
        d = cfg.decoder_channels
        kw = dict(norm=cfg.norm, n_groups=cfg.norm_groups, pad_mode=pad_mode, dtype=dtype)
        self.encoder = Encoder(enc_cfg, rng, pad_mode, dtype)
        if cfg.use_pa:
            self.pa = PAModule(ch[3], d, enc_cfg.input_size // 32, rng,
                               with_gap=cfg.inject_gap == "pa_branch", **kw)
        else:
            self.pa = ConvNormAct(ch[3], d, 1, rng, **kw)
        for i in range(cfg.n_up):
            setattr(self, f"up{i + 1}", UPModule(ch[2 - i], d, rng, up_conv=cfg.up_conv,
                                                 attention=cfg.inject_gap == "up_attention", **kw))
        self.classifier = _classifier(d, cfg.n_classes, rng, pad_mode, dtype)

    @property
    def output_stride(self) -> int:
        return 32 // 2**self.pylon_cfg.n_up

    def heatmap(self, x, nodes):
        feats = self.encoder(x)
        for i, f in enumerate(feats):
            nodes[f"encoder.stage{i + 1}"] = f
        if self.pylon_cfg.use_pa:
            y = self.pa(feats[3], nodes)
        else:
            y = self.pa(feats[3])
        nodes["pa"] = y
        for i in range(self.pylon_cfg.n_up):
            y = getattr(self, f"up{i + 1}")(feats[2 - i], y, nodes, prefix=f"up{i + 1}")
            nodes[f"up{i + 1}"] = y
        return self.classifier(y)


def variant_config(kind: str, pylon_cfg: PylonConfig) -> PylonConfig:
    """Apply the architectural toggles that define ``kind`` on top of ``pylon_cfg``."""
    if kind not in VARIANTS:
        raise ConfigurationError(f"unknown variant {kind!r}; choose from {', '.join(VARIANTS)}")
    overrides = {
        "backbone": {},
        "pylon": {},
        "pylon_no_pa": {"use_pa": False},
        "pylon_att": {"inject_gap": "up_attention"},
        "pylon_1up": {"n_up": 1},
        "pylon_2up": {"n_up": 2},
        "decoder_gap": {"inject_gap": "pa_branch"},
        "decoder_groupnorm": {"norm": "group"},
    }[kind]
    return dataclasses.replace(pylon_cfg, **overrides)


def build_variant(kind: str, enc_cfg: Optional[EncoderConfig] = None, pylon_cfg: Optional[PylonConfig] = None,
                  seed: int = 0, pad_mode: str = "zeros", dtype=np.float32) -> CAMNet:
    enc_cfg = enc_cfg or EncoderConfig()
    cfg = variant_config(kind, pylon_cfg or PylonConfig())
    if kind == "backbone":
        return BackboneNet(enc_cfg, cfg, seed, pad_mode, dtype)
    return PylonNet(enc_cfg, cfg, seed, pad_mode, dtype, kind=kind)


def forward(model: CAMNet, images, record: bool = False) -> ModelOutput:
    """Run ``model`` and global-max-pool its heatmap into logits.

    With ``record=True`` the returned output carries the named intermediate
    nodes used by the equivariance auditor.
    """
    x = T.as_tensor(images)
    cfg = model.enc_cfg
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DimensionError(f"model expects images of shape (n, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    if x.dtype != model.dtype:
        x = T.Tensor(x.data.astype(model.dtype))
    nodes: Dict[str, T.Tensor] = OrderedDict()
    heat = model.heatmap(x, nodes)
    logits = T.global_max_pool(heat)
    return ModelOutput(logits=logits, heatmap=heat, nodes=nodes if record else OrderedDict())


def cam_extract(output: ModelOutput, class_idx: int, target_size: Tuple[int, int]) -> np.ndarray:
    """Bilinearly resize one heatmap channel to ``target_size``; returns (n, H, W)."""
    heat = output.heatmap.data
    if not 0 <= class_idx < heat.shape[1]:
        raise IndexError(f"class index {class_idx} out of range for {heat.shape[1]} classes")
    channel = heat[:, class_idx : class_idx + 1]
    with T.no_grad():
        up = T.bilinear_upsample(T.Tensor(channel), size=tuple(target_size))
    return up.data[:, 0]
