"""Ghost modules, SE blocks, ghost bottlenecks, and the staged backbone.

A ghost module splits an expensive convolution into a thin primary
convolution that produces m intrinsic maps and a cheap depthwise
convolution that derives (s-1) ghost maps from each intrinsic map; the
concatenation restores the full width D = m*s at a fraction of the
multiply count. Bottlenecks stack two ghost modules (expansion with
ReLU, then linear projection) around an optional stride-2 depthwise
convolution and an optional squeeze-and-excitation gate, with a
residual shortcut.

Dilation enters through the depthwise convolutions of stride-1
bottlenecks. The padding rule r*(k-1)/2 keeps spatial sizes unchanged,
so switching dilation schemes changes neither shapes nor parameter
counts; stride-2 entries always run undilated to avoid gridding across
resolution changes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import lane_rng
from .tensor import BatchNormState, ConvSpec, Tensor, batchnorm2d, concat, conv2d, global_avg_pool, hard_sigmoid, relu

__all__ = [
    "GhostModuleConfig",
    "BottleneckEntry",
    "GhostCNNConfig",
    "GhostModule",
    "SEBlock",
    "GhostBottleneck",
    "GhostCNN",
    "effective_kernel",
    "receptive_field",
    "make_divisible",
    "default_table1_config",
    "parse_dilation_scheme",
    "ghost_module_forward",
    "se_block_forward",
    "ghost_bottleneck_forward",
    "ghostcnn_forward",
    "DILATION_SCHEMES",
]

# Stage layout of the default backbone: strides and SE flags per entry.
TABLE1_STRIDES = ((1, 2), (1, 2), (1, 2), (1, 1, 1, 1, 1, 2), (1, 1, 1, 1))
TABLE1_SE = ((0, 0), (0, 1), (1, 0), (0, 0, 0, 1, 1, 1), (0, 1, 0, 1))

# Default widths per stage entry: (in, mid, out). Stage outputs are the
# published 24/40/112/160 progression with a 960-wide final pointwise
# encoder; mid (expansion) widths grow thin-to-fat with depth, which is
# what keeps the cost profile inside the published reduction figures
# (see costmodel).
DEFAULT_STEM = 24
DEFAULT_FINAL = 960
DEFAULT_WIDTHS = (
    ((24, 24, 24), (24, 48, 40)),
    ((40, 80, 40), (40, 120, 112)),
    ((112, 224, 112), (112, 336, 160)),
    ((160, 320, 160), (160, 320, 160), (160, 320, 160), (160, 480, 160), (160, 480, 160), (160, 672, 160)),
    ((160, 960, 160), (160, 960, 160), (160, 960, 160), (160, 960, 160)),
)

DILATION_SCHEMES = ("1", "2", "3", "4", "5", "5-2", "5-3")


def effective_kernel(k: int, r: int) -> int:
    """Receptive extent of one k-tap convolution at dilation r."""
    if k < 1 or r < 1:
        raise ValueError("kernel size and dilation must be >= 1")
    return (k - 1) * r + 1


def receptive_field(layers) -> int:
    """Receptive extent of a stack of (kernel, dilation, stride) layers."""
    extent = 1
    jump = 1
    for k, r, s in layers:
        extent += (effective_kernel(k, r) - 1) * jump
        jump *= s
    return extent


def make_divisible(value: float, divisor: int) -> int:
    """Round to the nearest positive multiple of ``divisor``, never
    dropping below 90% of the requested value."""
    out = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if out < 0.9 * value:
        out += divisor
    return out


@dataclass
class GhostModuleConfig:
    """Shape of one ghost module.

    ``ratio`` s splits the D output channels into m = D/s intrinsic maps
    (primary convolution) and (s-1)*m ghost maps (depthwise cheap op of
    kernel ``cheap_kernel`` at ``dilation``). ``ratio`` 1 degenerates to
    a plain convolution with no cheap op.
    """

    in_channels: int
    out_channels: int
    ratio: int = 2
    primary_kernel: int = 1
    cheap_kernel: int = 3
    dilation: int = 1
    activation: bool = True

    def __post_init__(self):
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if self.out_channels % self.ratio:
            raise ValueError(f"out_channels={self.out_channels} must be divisible by ratio={self.ratio}")
        if self.intrinsic_channels < 1:
            raise ValueError("need at least one intrinsic map")

    @property
    def intrinsic_channels(self) -> int:
        return self.out_channels // self.ratio

    @property
    def ghost_channels(self) -> int:
        return self.out_channels - self.intrinsic_channels


@dataclass
class BottleneckEntry:
    """One ghost bottleneck row: widths, stride, SE flag, dilation."""

    in_channels: int
    mid_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    se: bool = False
    dilation: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.mid_channels < self.out_channels:
            raise ValueError(
                f"expansion width {self.mid_channels} must be >= out_channels {self.out_channels}"
            )
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def has_identity_shortcut(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass
class GhostCNNConfig:
    """Stem + five bottleneck stages + final pointwise encoder.

    Serializes to JSON with the schema::

        {"stem": int,
         "stages": [[{"in": .., "mid": .., "out": .., "kernel": ..,
                      "stride": .., "se": 0|1, "dilation": ..}, ..], ..],
         "final_conv": int,
         "channel_multiplier": float}
    """

    stem_channels: int
    stages: list
    final_channels: int
    channel_multiplier: float = 1.0
    ghost_ratio: int = 2
    cheap_kernel: int = 3
    primary_kernel: int = 1
    se_reduction: int = 4

    def entries(self):
        for stage in self.stages:
            yield from stage

    def to_json(self) -> str:
        doc = {
            "stem": self.stem_channels,
            "stages": [
                [
                    {
                        "in": e.in_channels,
                        "mid": e.mid_channels,
                        "out": e.out_channels,
                        "kernel": e.kernel,
                        "stride": e.stride,
                        "se": int(e.se),
                        "dilation": e.dilation,
                    }
                    for e in stage
                ]
                for stage in self.stages
            ],
            "final_conv": self.final_channels,
            "channel_multiplier": self.channel_multiplier,
            "ghost_ratio": self.ghost_ratio,
            "cheap_kernel": self.cheap_kernel,
            "primary_kernel": self.primary_kernel,
            "se_reduction": self.se_reduction,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GhostCNNConfig":
        doc = json.loads(text)
        stages = [
            [
                BottleneckEntry(
                    in_channels=e["in"],
                    mid_channels=e["mid"],
                    out_channels=e["out"],
                    kernel=e.get("kernel", 3),
                    stride=e["stride"],
                    se=bool(e.get("se", 0)),
                    dilation=e.get("dilation", 1),
                )
                for e in stage
            ]
            for stage in doc["stages"]
        ]
        return cls(
            stem_channels=doc["stem"],
            stages=stages,
            final_channels=doc["final_conv"],
            channel_multiplier=doc.get("channel_multiplier", 1.0),
            ghost_ratio=doc.get("ghost_ratio", 2),
            cheap_kernel=doc.get("cheap_kernel", 3),
            primary_kernel=doc.get("primary_kernel", 1),
            se_reduction=doc.get("se_reduction", 4),
        )


def parse_dilation_scheme(scheme) -> tuple:
    """Parse "a" or "a-b" into (early_rate, last_rate).

    The first rate covers stages 1 through 4, the second covers stage 5;
    a single rate applies everywhere.
    """
    text = str(scheme)
    parts = text.split("-")
    if len(parts) not in (1, 2) or not all(p.isdigit() and int(p) >= 1 for p in parts):
        raise ValueError(f"bad dilation scheme {scheme!r}; expected forms like '1', '3', '5-2'")
    a = int(parts[0])
    b = int(parts[1]) if len(parts) == 2 else a
    return a, b


def default_table1_config(
    dilation_scheme="1",
    channel_multiplier: float = 1.0,
    se_reduction: int = 4,
) -> GhostCNNConfig:
    """The default five-stage backbone configuration.

    Strides and SE flags follow the published stage layout exactly
    (bottleneck counts 2/2/2/6/4, spatial halving at each stage end
    through stage 4). The dilation scheme assigns its first rate to the
    stride-1 entries of stages 1 through 4 and its second rate to stage
    5; stride-2 entries run undilated. ``channel_multiplier`` scales
    every width, rounding to multiples of 2 (SE-gated expansion widths
    to multiples of ``se_reduction`` so the gate stays well formed).
    """
    early, last = parse_dilation_scheme(dilation_scheme)
    if channel_multiplier <= 0:
        raise ValueError("channel_multiplier must be positive")

    def scale(width, se_gated=False):
        if channel_multiplier == 1.0:
            return width
        divisor = max(2, se_reduction) if se_gated else 2
        return make_divisible(width * channel_multiplier, divisor)

    stages = []
    for stage_idx, (widths, strides, se_flags) in enumerate(zip(DEFAULT_WIDTHS, TABLE1_STRIDES, TABLE1_SE)):
        rate = last if stage_idx == 4 else early
        stage = []
        for (cin, mid, cout), stride, se in zip(widths, strides, se_flags):
            stage.append(
                BottleneckEntry(
                    in_channels=scale(cin),
                    mid_channels=scale(mid, se_gated=bool(se)),
                    out_channels=scale(cout),
                    kernel=3,
                    stride=stride,
                    se=bool(se),
                    dilation=1 if stride == 2 else rate,
                )
            )
        stages.append(stage)
    return GhostCNNConfig(
        stem_channels=scale(DEFAULT_STEM),
        stages=stages,
        final_channels=scale(DEFAULT_FINAL),
        channel_multiplier=channel_multiplier,
        se_reduction=se_reduction,
    )


# ---------------------------------------------------------------------------
# runnable layers


class Conv2dLayer:
    """Convolution weights (He init) bound to a ConvSpec."""

    def __init__(self, spec: ConvSpec, rng, bias: bool = False, dtype=np.float32):
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        weight = rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(weight.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class BatchNormLayer:
    """BatchNormState plus the call that applies it."""

    def __init__(self, channels: int, dtype=np.float32):
        self.state = BatchNormState.create(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.state, training)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.state.gamma
        yield f"{prefix}.beta", self.state.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.state.running_mean
        yield f"{prefix}.running_var", self.state.running_var

    def set_buffer(self, name: str, value: np.ndarray):
        value = np.asarray(value, dtype=self.state.running_mean.dtype)
        if name.endswith("running_mean"):
            self.state.running_mean = value.copy()
        elif name.endswith("running_var"):
            self.state.running_var = value.copy()
        else:
            raise KeyError(name)


class ConvBnAct:
    """conv -> batchnorm -> optional ReLU."""

    def __init__(self, spec: ConvSpec, rng, act: bool, dtype=np.float32):
        self.conv = Conv2dLayer(spec, rng, bias=False, dtype=dtype)
        self.bn = BatchNormLayer(spec.out_channels, dtype=dtype)
        self.act = act

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = self.bn(self.conv(x), training)
        return relu(out) if self.act else out

    def named_parameters(self, prefix: str):
        yield from self.conv.named_parameters(f"{prefix}.conv")
        yield from self.bn.named_parameters(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(f"{prefix}.bn")


class GhostModule:
    """Primary convolution for intrinsic maps + cheap depthwise ghosts.

    Output channels [0, m) are the intrinsic block passed through
    unchanged (the identity branch of the cheap-op family); channels
    [m, D) hold the ghost maps, where ghost j of intrinsic i sits at
    m + i*(s-1) + j.
    """

    def __init__(self, cfg: GhostModuleConfig, rng, dtype=np.float32):
        self.cfg = cfg
        m = cfg.intrinsic_channels
        pk = cfg.primary_kernel
        self.primary = ConvBnAct(
            ConvSpec(cfg.in_channels, m, kernel=pk, padding=(pk - 1) // 2),
            rng,
            act=cfg.activation,
            dtype=dtype,
        )
        if cfg.ratio > 1:
            d = cfg.cheap_kernel
            self.cheap = ConvBnAct(
                ConvSpec(
                    m,
                    cfg.ghost_channels,
                    kernel=d,
                    padding=cfg.dilation * (d - 1) // 2,
                    dilation=cfg.dilation,
                    groups=m,
                ),
                rng,
                act=cfg.activation,
                dtype=dtype,
            )
        else:
            self.cheap = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        intrinsic = self.primary(x, training)
        if self.cheap is None:
            return intrinsic
        ghosts = self.cheap(intrinsic, training)
        return concat([intrinsic, ghosts], axis=1)

    def named_parameters(self, prefix: str):
        yield from self.primary.named_parameters(f"{prefix}.primary")
        if self.cheap is not None:
            yield from self.cheap.named_parameters(f"{prefix}.cheap")

    def named_buffers(self, prefix: str):
        yield from self.primary.named_buffers(f"{prefix}.primary")
        if self.cheap is not None:
            yield from self.cheap.named_buffers(f"{prefix}.cheap")


class SEBlock:
    """Squeeze-and-excitation channel gate.

    Global average pool, pointwise squeeze to C/reduction, ReLU,
    pointwise excite back to C, hard-sigmoid, channelwise multiply.
    """

    def __init__(self, channels: int, reduction: int, rng, dtype=np.float32):
        if reduction < 1 or channels % reduction:
            raise ValueError(f"channels={channels} must be divisible by reduction={reduction}")
        squeezed = channels // reduction
        self.fc1 = Conv2dLayer(ConvSpec(channels, squeezed, kernel=1), rng, bias=True, dtype=dtype)
        self.fc2 = Conv2dLayer(ConvSpec(squeezed, channels, kernel=1), rng, bias=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        gate = hard_sigmoid(self.fc2(relu(self.fc1(global_avg_pool(x)))))
        return x * gate

    def named_parameters(self, prefix: str):
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")

    def named_buffers(self, prefix: str):
        return iter(())


class GhostBottleneck:
    """Two ghost modules around optional downsampling and SE gating.

    Main path: expansion ghost module (ReLU) -> [stride 2: depthwise
    3x3 stride-2 + BN] -> [SE] -> projection ghost module (linear).
    Shortcut: identity when stride 1 and in == out, otherwise strided
    depthwise + BN then pointwise projection + BN.
    """

    def __init__(self, entry: BottleneckEntry, rng, se_reduction: int = 4, ghost_ratio: int = 2,
                 cheap_kernel: int = 3, primary_kernel: int = 1, dtype=np.float32):
        self.entry = entry
        self.gm1 = GhostModule(
            GhostModuleConfig(
                entry.in_channels,
                entry.mid_channels,
                ratio=ghost_ratio,
                primary_kernel=primary_kernel,
                cheap_kernel=cheap_kernel,
                dilation=entry.dilation,
                activation=True,
            ),
            rng,
            dtype=dtype,
        )
        if entry.stride == 2:
            k = entry.kernel
            self.down = ConvBnAct(
                ConvSpec(
                    entry.mid_channels,
                    entry.mid_channels,
                    kernel=k,
                    stride=2,
                    padding=(k - 1) // 2,
                    groups=entry.mid_channels,
                ),
                rng,
                act=False,
                dtype=dtype,
            )
        else:
            self.down = None
        self.se = SEBlock(entry.mid_channels, se_reduction, rng, dtype=dtype) if entry.se else None
        self.gm2 = GhostModule(
            GhostModuleConfig(
                entry.mid_channels,
                entry.out_channels,
                ratio=ghost_ratio,
                primary_kernel=primary_kernel,
                cheap_kernel=cheap_kernel,
                dilation=entry.dilation,
                activation=False,
            ),
            rng,
            dtype=dtype,
        )
        if entry.has_identity_shortcut:
            self.shortcut_dw = None
            self.shortcut_pw = None
        else:
            k = entry.kernel
            r = entry.dilation if entry.stride == 1 else 1
            self.shortcut_dw = ConvBnAct(
                ConvSpec(
                    entry.in_channels,
                    entry.in_channels,
                    kernel=k,
                    stride=entry.stride,
                    padding=r * (k - 1) // 2,
                    dilation=r,
                    groups=entry.in_channels,
                ),
                rng,
                act=False,
                dtype=dtype,
            )
            self.shortcut_pw = ConvBnAct(
                ConvSpec(entry.in_channels, entry.out_channels, kernel=1),
                rng,
                act=False,
                dtype=dtype,
            )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = self.gm1(x, training)
        if self.down is not None:
            out = self.down(out, training)
        if self.se is not None:
            out = self.se(out)
        out = self.gm2(out, training)
        if self.shortcut_dw is None:
            return out + x
        short = self.shortcut_pw(self.shortcut_dw(x, training), training)
        return out + short

    def _components(self):
        yield "gm1", self.gm1
        if self.down is not None:
            yield "down", self.down
        if self.se is not None:
            yield "se", self.se
        yield "gm2", self.gm2
        if self.shortcut_dw is not None:
            yield "sc_dw", self.shortcut_dw
            yield "sc_pw", self.shortcut_pw

    def named_parameters(self, prefix: str):
        for name, comp in self._components():
            yield from comp.named_parameters(f"{prefix}.{name}")

    def named_buffers(self, prefix: str):
        for name, comp in self._components():
            yield from comp.named_buffers(f"{prefix}.{name}")


class GhostCNN:
    """The staged backbone: stem, bottleneck stages, final encoder conv.

    Input images are (N, 3, H, W) with H and W divisible by 32; the
    output local-descriptor map is (N, final_channels, H/32, W/32).
    """

    def __init__(self, config: GhostCNNConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = lane_rng(seed, "init.ghostcnn")
        self.stem = ConvBnAct(ConvSpec(3, config.stem_channels, kernel=3, stride=2, padding=1), rng, act=True, dtype=dtype)
        self.stages = []
        for stage in config.stages:
            self.stages.append(
                [
                    GhostBottleneck(
                        entry,
                        rng,
                        se_reduction=config.se_reduction,
                        ghost_ratio=config.ghost_ratio,
                        cheap_kernel=config.cheap_kernel,
                        primary_kernel=config.primary_kernel,
                        dtype=dtype,
                    )
                    for entry in stage
                ]
            )
        last_out = config.stages[-1][-1].out_channels
        self.final = ConvBnAct(ConvSpec(last_out, config.final_channels, kernel=1), rng, act=True, dtype=dtype)

    @property
    def encoder_dim(self) -> int:
        return self.config.final_channels

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"input H and W must be divisible by 32, got {x.shape[2]}x{x.shape[3]}")
        out = self.stem(x, training)
        for stage in self.stages:
            for block in stage:
                out = block(out, training)
        return self.final(out, training)

    def _components(self):
        yield "stem", self.stem
        for i, stage in enumerate(self.stages, start=1):
            for j, block in enumerate(stage):
                yield f"s{i}.b{j}", block
        yield "final", self.final

    def named_parameters(self):
        for name, comp in self._components():
            yield from comp.named_parameters(name)

    def named_buffers(self):
        for name, comp in self._components():
            yield from comp.named_buffers(name)

    def parameter_count(self) -> int:
        return sum(int(t.data.size) for _, t in self.named_parameters())

    def state_arrays(self) -> dict:
        """Parameters plus running statistics, for checkpointing."""
        out = {name: tensor.data for name, tensor in self.named_parameters()}
        out.update({name: buf for name, buf in self.named_buffers()})
        return out

    def bn_layers(self):
        """(path, BatchNormLayer) pairs mirroring ``named_buffers`` paths."""
        for name, comp in self._components():
            yield from _walk_bn(comp, name)

    def load_state_arrays(self, arrays: dict):
        for name, tensor in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            value = np.asarray(arrays[name], dtype=tensor.data.dtype)
            if value.shape != tensor.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {tensor.data.shape}")
            tensor.data = value.copy()
            tensor.grad = None
        for path, layer in self.bn_layers():
            for stat in ("running_mean", "running_var"):
                bname = f"{path}.{stat}"
                if bname not in arrays:
                    raise KeyError(f"checkpoint missing buffer {bname!r}")
                layer.set_buffer(bname, arrays[bname])


def _walk_bn(component, prefix):
    """Yield (path, BatchNormLayer) pairs below ``component``, matching
    the path structure that named_buffers emits."""
    if isinstance(component, BatchNormLayer):
        yield prefix, component
    elif isinstance(component, ConvBnAct):
        yield f"{prefix}.bn", component.bn
    elif isinstance(component, GhostModule):
        yield from _walk_bn(component.primary, f"{prefix}.primary")
        if component.cheap is not None:
            yield from _walk_bn(component.cheap, f"{prefix}.cheap")
    elif isinstance(component, GhostBottleneck):
        for name, child in component._components():
            yield from _walk_bn(child, f"{prefix}.{name}")
    # SEBlock has no normalization state


# functional wrappers matching the op-style interface


def ghost_module_forward(x: Tensor, module: GhostModule, training: bool = False) -> Tensor:
    return module(x, training)


def se_block_forward(x: Tensor, block: SEBlock) -> Tensor:
    return block(x)


def ghost_bottleneck_forward(x: Tensor, block: GhostBottleneck, training: bool = False) -> Tensor:
    return block(x, training)


def ghostcnn_forward(images: Tensor, model: GhostCNN, training: bool = False) -> Tensor:
    return model(images, training)
