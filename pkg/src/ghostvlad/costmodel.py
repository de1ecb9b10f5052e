"""Analytical MAC/FLOP/parameter accounting for layer chains.

Counting convention, stated here once and printed in every report
header: one MAC is one multiply-accumulate; FLOPs = 2 * MACs.  Only
convolution (full, pointwise, depthwise, grouped) and linear layers
count MACs; activation, pooling, normalization, and softmax arithmetic
are excluded as non-dominant.  Parameters count conv weights, biases,
and batchnorm affine pairs.  A PCA projection, when present, is
reported separately and excluded from the headline totals.

Two ready-made architecture builders cover the comparison that matters
here: the ghost backbone with a VLAD head, and a classic 13-conv VGG16
with the same head as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ghostnet import BottleneckEntry, GhostCNNConfig, GhostModuleConfig, default_table1_config
from .tensor import ConvSpec

__all__ = [
    "LayerCost",
    "LayerDef",
    "ArchitectureSpec",
    "CostReport",
    "CostComparison",
    "conv_cost",
    "ghost_module_cost",
    "ghost_bottleneck_cost",
    "vlad_head_cost",
    "model_cost",
    "compare_costs",
    "ghostcnn_netvlad_spec",
    "vgg16_netvlad_spec",
]

CONVENTION_NOTE = "FLOPs = 2*MACs; conv/linear MACs only; params include biases and batchnorm affine pairs"


@dataclass(frozen=True)
class LayerCost:
    """Cost of one named layer: MACs per batch item, params, out shape."""

    name: str
    out_shape: tuple
    macs: int
    params: int

    def __post_init__(self):
        if self.macs < 0 or self.params < 0:
            raise ValueError("costs must be non-negative")

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass(frozen=True)
class LayerDef:
    """One entry of an ArchitectureSpec: a kind tag plus its payload."""

    name: str
    kind: str  # conv | ghost | bottleneck | pool | vlad
    payload: dict


@dataclass
class ArchitectureSpec:
    """Named ordered layer descriptors plus the input shape (C, H, W)."""

    name: str
    input_shape: tuple
    layers: list


@dataclass
class CostReport:
    """Per-layer costs with totals, a text table, and a JSON view."""

    title: str
    input_shape: tuple
    layers: list
    extra_params: dict = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    def render_text(self) -> str:
        rows = [("layer", "out shape", "MACs", "FLOPs", "params")]
        for layer in self.layers:
            rows.append(
                (
                    layer.name,
                    "x".join(str(d) for d in layer.out_shape),
                    f"{layer.macs:,}",
                    f"{layer.flops:,}",
                    f"{layer.params:,}",
                )
            )
        rows.append(("total", "", f"{self.total_macs:,}", f"{self.total_flops:,}", f"{self.total_params:,}"))
        widths = [max(len(row[i]) for row in rows) for i in range(5)]
        lines = [
            f"{self.title}  (input {'x'.join(str(d) for d in self.input_shape)})",
            f"convention: {CONVENTION_NOTE}",
        ]
        header, *body = rows
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
        lines.append("  ".join("-" * w for w in widths))
        for row in body:
            cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1])]
            cells += [cell.rjust(w) for cell, w in zip(row[2:], widths[2:])]
            lines.append("  ".join(cells).rstrip())
        for name, count in self.extra_params.items():
            lines.append(f"excluded from totals: {name} = {count:,} params")
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {
            "title": self.title,
            "input_shape": list(self.input_shape),
            "convention": CONVENTION_NOTE,
            "layers": [
                {
                    "name": layer.name,
                    "out_shape": list(layer.out_shape),
                    "macs": layer.macs,
                    "flops": layer.flops,
                    "params": layer.params,
                }
                for layer in self.layers
            ],
            "totals": {
                "macs": self.total_macs,
                "flops": self.total_flops,
                "params": self.total_params,
            },
            "extra_params": dict(self.extra_params),
        }


def conv_cost(spec: ConvSpec, in_shape: tuple, name: str = "conv", bias: bool = False, batchnorm: bool = False) -> LayerCost:
    """Cost of one convolution on a (C, H, W) input, per batch item.

    macs = out_channels * H_out * W_out * (C/groups) * kh * kw; params
    add the bias vector and the 2*out_channels batchnorm affine pair
    when the layer carries them.
    """
    c, h, w = in_shape
    if c != spec.in_channels:
        raise ValueError(f"{name}: input has {c} channels, spec expects {spec.in_channels}")
    ho, wo = spec.out_shape(h, w)
    kh, kw = spec.kernel
    per_position = (spec.in_channels // spec.groups) * kh * kw
    macs = spec.out_channels * ho * wo * per_position
    params = spec.out_channels * per_position
    if bias:
        params += spec.out_channels
    if batchnorm:
        params += 2 * spec.out_channels
    return LayerCost(name=name, out_shape=(spec.out_channels, ho, wo), macs=macs, params=params)


def ghost_module_cost(cfg: GhostModuleConfig, in_shape: tuple, name: str = "ghost", batchnorm: bool = True) -> LayerCost:
    """Primary conv to m intrinsic maps plus depthwise cheap op to the
    (s-1)*m ghost maps; the identity branch costs nothing. Independent
    of the dilation rate (padding preserves the output size)."""
    primary = conv_cost(
        ConvSpec(
            cfg.in_channels,
            cfg.intrinsic_channels,
            kernel=cfg.primary_kernel,
            padding=(cfg.primary_kernel - 1) // 2,
        ),
        in_shape,
        name=f"{name}.primary",
        batchnorm=batchnorm,
    )
    if cfg.ratio == 1:
        return LayerCost(name=name, out_shape=primary.out_shape, macs=primary.macs, params=primary.params)
    m = cfg.intrinsic_channels
    cheap = conv_cost(
        ConvSpec(
            m,
            cfg.ghost_channels,
            kernel=cfg.cheap_kernel,
            padding=cfg.dilation * (cfg.cheap_kernel - 1) // 2,
            dilation=cfg.dilation,
            groups=m,
        ),
        primary.out_shape,
        name=f"{name}.cheap",
        batchnorm=batchnorm,
    )
    out_shape = (cfg.out_channels, cheap.out_shape[1], cheap.out_shape[2])
    return LayerCost(name=name, out_shape=out_shape, macs=primary.macs + cheap.macs, params=primary.params + cheap.params)


def ghost_bottleneck_cost(
    entry: BottleneckEntry,
    in_shape: tuple,
    name: str = "bottleneck",
    se_reduction: int = 4,
    ghost_ratio: int = 2,
    cheap_kernel: int = 3,
    primary_kernel: int = 1,
) -> LayerCost:
    """Aggregate cost of one ghost bottleneck (both ghost modules, the
    optional stride-2 depthwise, SE gate, and the shortcut path)."""
    macs = params = 0

    def add(layer: LayerCost) -> tuple:
        nonlocal macs, params
        macs += layer.macs
        params += layer.params
        return layer.out_shape

    shape = add(
        ghost_module_cost(
            GhostModuleConfig(
                entry.in_channels,
                entry.mid_channels,
                ratio=ghost_ratio,
                primary_kernel=primary_kernel,
                cheap_kernel=cheap_kernel,
                dilation=entry.dilation,
            ),
            in_shape,
            name=f"{name}.gm1",
        )
    )
    if entry.stride == 2:
        k = entry.kernel
        shape = add(
            conv_cost(
                ConvSpec(
                    entry.mid_channels,
                    entry.mid_channels,
                    kernel=k,
                    stride=2,
                    padding=(k - 1) // 2,
                    groups=entry.mid_channels,
                ),
                shape,
                name=f"{name}.down",
                batchnorm=True,
            )
        )
    if entry.se:
        c = entry.mid_channels
        squeezed = c // se_reduction
        macs += 2 * c * squeezed  # two pointwise convs on the pooled 1x1 map
        params += c * squeezed + squeezed + squeezed * c + c
    shape = add(
        ghost_module_cost(
            GhostModuleConfig(
                entry.mid_channels,
                entry.out_channels,
                ratio=ghost_ratio,
                primary_kernel=primary_kernel,
                cheap_kernel=cheap_kernel,
                dilation=entry.dilation,
            ),
            shape,
            name=f"{name}.gm2",
        )
    )
    if not entry.has_identity_shortcut:
        k = entry.kernel
        r = entry.dilation if entry.stride == 1 else 1
        sc_shape = add(
            conv_cost(
                ConvSpec(
                    entry.in_channels,
                    entry.in_channels,
                    kernel=k,
                    stride=entry.stride,
                    padding=r * (k - 1) // 2,
                    dilation=r,
                    groups=entry.in_channels,
                ),
                in_shape,
                name=f"{name}.sc_dw",
                batchnorm=True,
            )
        )
        add(
            conv_cost(
                ConvSpec(entry.in_channels, entry.out_channels, kernel=1),
                sc_shape,
                name=f"{name}.sc_pw",
                batchnorm=True,
            )
        )
    return LayerCost(name=name, out_shape=shape, macs=macs, params=params)


def vlad_head_cost(d: int, locations: int, k: int, name: str = "vlad") -> LayerCost:
    """Assignment conv (D*K per location) plus residual accumulation
    (K*D per location); params = assignment weights and biases plus the
    centers, 2*K*D + K."""
    macs = 2 * k * d * locations
    params = 2 * k * d + k
    return LayerCost(name=name, out_shape=(k * d,), macs=macs, params=params)


def model_cost(arch: ArchitectureSpec) -> CostReport:
    """Chain layer shapes through ``arch`` and sum the per-layer costs."""
    shape = tuple(arch.input_shape)
    layers = []
    for layer in arch.layers:
        kind, payload = layer.kind, layer.payload
        if kind == "conv":
            cost = conv_cost(
                payload["spec"],
                shape,
                name=layer.name,
                bias=payload.get("bias", False),
                batchnorm=payload.get("batchnorm", False),
            )
        elif kind == "ghost":
            cost = ghost_module_cost(payload["cfg"], shape, name=layer.name)
        elif kind == "bottleneck":
            cost = ghost_bottleneck_cost(
                payload["entry"],
                shape,
                name=layer.name,
                se_reduction=payload.get("se_reduction", 4),
                ghost_ratio=payload.get("ghost_ratio", 2),
                cheap_kernel=payload.get("cheap_kernel", 3),
                primary_kernel=payload.get("primary_kernel", 1),
            )
        elif kind == "pool":
            c, h, w = shape
            window = payload.get("window", 2)
            stride = payload.get("stride", window)
            cost = LayerCost(name=layer.name, out_shape=(c, h // stride, w // stride), macs=0, params=0)
        elif kind == "vlad":
            c, h, w = shape
            cost = vlad_head_cost(c, h * w, payload["k"], name=layer.name)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        layers.append(cost)
        shape = cost.out_shape
    return CostReport(title=arch.name, input_shape=tuple(arch.input_shape), layers=layers)


@dataclass(frozen=True)
class CostComparison:
    """Reduction of ``candidate`` relative to ``baseline`` in percent."""

    baseline: str
    candidate: str
    flops_reduction: float
    params_reduction: float

    def render_text(self) -> str:
        return (
            f"{self.candidate} vs {self.baseline}: "
            f"FLOPs reduced by {self.flops_reduction:.2f}%, "
            f"params reduced by {self.params_reduction:.2f}%"
        )

    def to_json_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "candidate": self.candidate,
            "flops_reduction_pct": self.flops_reduction,
            "params_reduction_pct": self.params_reduction,
        }


def compare_costs(baseline: CostReport, candidate: CostReport) -> CostComparison:
    """100 * (1 - candidate/baseline) for FLOPs and params."""
    if baseline.total_flops == 0 or baseline.total_params == 0:
        raise ValueError("baseline totals must be nonzero")
    return CostComparison(
        baseline=baseline.title,
        candidate=candidate.title,
        flops_reduction=100.0 * (1.0 - candidate.total_flops / baseline.total_flops),
        params_reduction=100.0 * (1.0 - candidate.total_params / baseline.total_params),
    )


def ghostcnn_netvlad_spec(config: GhostCNNConfig = None, input_hw: tuple = (480, 640), k: int = 64) -> ArchitectureSpec:
    """The ghost backbone plus VLAD head as an ArchitectureSpec."""
    if config is None:
        config = default_table1_config()
    layers = [
        LayerDef(
            "stem",
            "conv",
            {"spec": ConvSpec(3, config.stem_channels, kernel=3, stride=2, padding=1), "batchnorm": True},
        )
    ]
    for i, stage in enumerate(config.stages, start=1):
        for j, entry in enumerate(stage):
            layers.append(
                LayerDef(
                    f"s{i}.b{j}",
                    "bottleneck",
                    {
                        "entry": entry,
                        "se_reduction": config.se_reduction,
                        "ghost_ratio": config.ghost_ratio,
                        "cheap_kernel": config.cheap_kernel,
                        "primary_kernel": config.primary_kernel,
                    },
                )
            )
    last_out = config.stages[-1][-1].out_channels
    layers.append(
        LayerDef("final", "conv", {"spec": ConvSpec(last_out, config.final_channels, kernel=1), "batchnorm": True})
    )
    layers.append(LayerDef("vlad", "vlad", {"k": k}))
    return ArchitectureSpec(name="ghostcnn-netvlad", input_shape=(3,) + tuple(input_hw), layers=layers)


VGG16_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


def vgg16_netvlad_spec(input_hw: tuple = (480, 640), k: int = 64) -> ArchitectureSpec:
    """Classic 13-conv VGG16 cropped after conv5_3 (biases, no
    batchnorm, 2x2 max pools after blocks 1-4), plus the VLAD head."""
    layers = []
    in_ch = 3
    for b, widths in enumerate(VGG16_BLOCKS, start=1):
        for c, width in enumerate(widths, start=1):
            layers.append(
                LayerDef(
                    f"conv{b}_{c}",
                    "conv",
                    {"spec": ConvSpec(in_ch, width, kernel=3, padding=1), "bias": True},
                )
            )
            in_ch = width
        if b < 5:
            layers.append(LayerDef(f"pool{b}", "pool", {"window": 2, "stride": 2}))
    layers.append(LayerDef("vlad", "vlad", {"k": k}))
    return ArchitectureSpec(name="vgg16-netvlad", input_shape=(3,) + tuple(input_hw), layers=layers)
