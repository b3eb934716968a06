"""Cross-scale residual network: shallow extraction, CSRB trunk, fusion, reconstruction.

Parameter names are flat strings, ``<layer>.kernel`` / ``<layer>.bias``:

``sfe1``, ``sfe2``
    shallow 7x7 (1->64) and 3x3 (64->32) convolutions.
``block{d}.s{s}.input`` / ``.output``
    1x1 convolutions entering and leaving scale ``s`` of block ``d`` (1-based).
``block{d}.s{s}.res{r}.conv1`` / ``.conv2``
    the two 3x3 convolutions of residual unit ``r``.
``block{d}.s{s}.down``
    strided convolution carrying scale ``s-2`` input features into scale ``s``.
``block{d}.s{s}.up``
    transposed convolution carrying scale ``s`` output back to scale ``s-2``.
``fusion``, ``rec1``, ``rec2``
    hierarchical fusion 1x1 and the two reconstruction 3x3 convolutions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .tensor import (
    ConvWeights,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    conv2d_transpose,
    default_dtype,
    relu,
)

__all__ = [
    "NetConfig",
    "Network",
    "BlockState",
    "VARIANTS",
    "build_network",
    "shallow_forward",
    "csrb_forward",
    "residual_block",
    "fusion_forward",
    "forward",
    "predict",
    "restore_plane",
    "make_variant",
    "count_params",
]

LEGAL_SCALES = ((0,), (0, 2), (0, 2, 4))
# F_down: 4x4 stride 2 pad 1 halves even extents exactly; F_up mirrors it
SAMPLER_KERNEL = 4


@dataclass(frozen=True)
class NetConfig:
    blocks: int = 8
    resblocks: int = 6
    scales: tuple[int, ...] = (0, 2, 4)
    dense: bool = True
    first_width: int = 64
    width: int = 32
    out_channels: int = 1
    first_kernel: int = 7
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(sorted(int(s) for s in self.scales)))
        if self.scales not in LEGAL_SCALES:
            raise ValueError(f"scales must be one of {LEGAL_SCALES}, got {self.scales}")
        if self.blocks < 1 or self.resblocks < 1:
            raise ValueError(f"blocks and resblocks must be positive, got D={self.blocks}, R={self.resblocks}")
        if min(self.first_width, self.width, self.first_kernel, self.kernel) < 1:
            raise ValueError("widths and kernel sizes must be positive")
        if self.out_channels != 1:
            raise ValueError(f"output width must be 1 (luminance), got {self.out_channels}")

    @property
    def divisor(self) -> int:
        """Spatial extents must be multiples of this."""
        return 2 ** (max(self.scales) // 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{**d, "scales": tuple(d["scales"])})

    def layers(self) -> dict[str, tuple[int, int, int, str]]:
        """Layer name -> (out_channels, in_channels, kernel_size, kind) for every convolution."""
        w = self.width
        spec = {
            "sfe1": (self.first_width, 1, self.first_kernel, "conv"),
            "sfe2": (w, self.first_width, self.kernel, "conv"),
        }
        for d in range(1, self.blocks + 1):
            n_pre = d - 1 if self.dense else min(d - 1, 1)
            for s in self.scales:
                spec[f"block{d}.s{s}.input"] = (w, w * (n_pre + 1), 1, "conv")
                for r in range(1, self.resblocks + 1):
                    spec[f"block{d}.s{s}.res{r}.conv1"] = (w, w, self.kernel, "conv")
                    spec[f"block{d}.s{s}.res{r}.conv2"] = (w, w, self.kernel, "conv")
                spec[f"block{d}.s{s}.output"] = (w, w, 1, "conv")
                if s > 0:
                    spec[f"block{d}.s{s}.down"] = (w, w, SAMPLER_KERNEL, "down")
                    spec[f"block{d}.s{s}.up"] = (w, w, SAMPLER_KERNEL, "up")
        spec["fusion"] = (self.first_width, w * (self.blocks + 1), 1, "conv")
        spec["rec1"] = (w, self.first_width, self.kernel, "conv")
        spec["rec2"] = (self.out_channels, w, self.kernel, "conv")
        return spec


class Network:
    """A config plus its flat parameter map."""

    def __init__(self, config: NetConfig, params: dict[str, Tensor]):
        expected = {name for name, _ in manifest(config)}
        if set(params) != expected:
            missing = sorted(expected - set(params))
            extra = sorted(set(params) - expected)
            raise ValueError(f"parameter set does not match config: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, shape in manifest(config):
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self._kinds = {name: kind for name, (_, _, _, kind) in config.layers().items()}

    def conv(self, layer: str) -> ConvWeights:
        return ConvWeights(self.params[f"{layer}.kernel"], self.params[f"{layer}.bias"])

    @property
    def dtype(self) -> np.dtype:
        return self.params["sfe1.kernel"].dtype

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return manifest(self.config)

    def manifest_text(self) -> str:
        return manifest_text(self.config)

    def astype(self, dtype) -> "Network":
        return Network(self.config, {k: Tensor(v.data, requires_grad=True, dtype=dtype) for k, v in self.params.items()})

    def with_params(self, arrays: dict[str, np.ndarray]) -> "Network":
        """A network sharing this config with replacement parameter values."""
        return Network(self.config, {k: Tensor(arrays[k], requires_grad=True, dtype=self.dtype) for k in self.params})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def tensors(self) -> list[Tensor]:
        return [self.params[name] for name, _ in self.manifest()]


def manifest(config: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Sorted (name, shape) listing of every parameter tensor."""
    out = []
    for layer, (o, i, k, _) in config.layers().items():
        out.append((f"{layer}.kernel", (o, i, k, k)))
        out.append((f"{layer}.bias", (o,)))
    return sorted(out)


def manifest_text(config: NetConfig) -> str:
    return "".join(f"{name} {'x'.join(map(str, shape))}\n" for name, shape in manifest(config))


def relu_follows(layer: str) -> bool:
    """Whether the layer's output passes through a ReLU."""
    return layer in ("sfe1", "sfe2", "rec1") or layer.endswith(".conv1")


def build_network(config: NetConfig, seed: int = 0, dtype=None) -> Network:
    """Allocate parameters: He fan-in normal kernels, zero biases, drawn in manifest order.

    The gain is 2/fan_in in front of a ReLU and 1/fan_in for linear layers, and
    the second conv of every residual unit starts at zero so each unit is the
    identity at initialization. Without the last two, the unscaled residual
    and cross-scale additions blow activations up by orders of magnitude.
    """
    dtype = default_dtype() if dtype is None else np.dtype(dtype)
    rng = np.random.default_rng(seed)
    layers = config.layers()
    params = {}
    for name, shape in manifest(config):
        layer, what = name.rsplit(".", 1)
        if what == "bias":
            params[name] = Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)
            continue
        o, i, k, kind = layers[layer]
        fan_in = i * k * k
        if kind == "up":
            # each output pixel of a stride-2 transposed conv sees (k/2)^2 taps per channel
            fan_in = i * (k // 2) ** 2
        std = math.sqrt((2.0 if relu_follows(layer) else 1.0) / fan_in)
        draw = rng.standard_normal(shape) * std
        if layer.endswith(".conv2"):
            draw[...] = 0.0
        params[name] = Tensor(draw, requires_grad=True, dtype=dtype)
    return Network(config, params)


@dataclass
class BlockState:
    """Per-scale outputs of the blocks computed so far."""

    outputs: dict[int, list[Tensor]] = field(default_factory=dict)

    @property
    def completed(self) -> int:
        return len(self.outputs.get(0, []))

    def append(self, per_scale: dict[int, Tensor]):
        for s, t in per_scale.items():
            self.outputs.setdefault(s, []).append(t)

    def pre(self, s: int, dense: bool) -> list[Tensor]:
        done = self.outputs.get(s, [])
        return list(done) if dense else done[-1:]


def _conv_same(x: Tensor, w: ConvWeights) -> Tensor:
    return conv2d(x, w, stride=1, padding=w.kernel_size[0] // 2)


def shallow_forward(net: Network, x: Tensor) -> tuple[Tensor, Tensor]:
    if x.shape[1] != 1:
        raise ShapeError(f"network input must have 1 channel, got {x.shape[1]}")
    f1 = relu(_conv_same(x, net.conv("sfe1")))
    f2 = relu(_conv_same(f1, net.conv("sfe2")))
    return f1, f2


def residual_block(x: Tensor, w1: ConvWeights, w2: ConvWeights) -> Tensor:
    """x + conv(relu(conv(x))), no normalization, no residual scaling."""
    c = x.shape[1]
    if w1.in_channels != c or w2.out_channels != c:
        raise ShapeError(
            f"residual block width mismatch: input {c} channels, convs {w1.in_channels}->{w1.out_channels}"
            f"->{w2.out_channels}"
        )
    return add(x, _conv_same(relu(_conv_same(x, w1)), w2))


def _concat_or_single(parts: list[Tensor]) -> Tensor:
    return parts[0] if len(parts) == 1 else concat_channels(parts)


def csrb_forward(net: Network, d: int, f2: Tensor, state: BlockState) -> dict[int, Tensor]:
    """Run block ``d`` (1-based); returns scale -> output features."""
    cfg = net.config
    if not 1 <= d <= cfg.blocks:
        raise ValueError(f"block index {d} outside 1..{cfg.blocks}")
    if state.completed != d - 1:
        raise ValueError(f"block {d} needs outputs of {d - 1} preceding blocks, state holds {state.completed}")

    inputs: dict[int, Tensor] = {}
    for s in cfg.scales:
        if s == 0:
            link = f2
        else:
            link = conv2d(inputs[s - 2], net.conv(f"block{d}.s{s}.down"), stride=2, padding=1)
        parts = state.pre(s, cfg.dense) + [link]
        inputs[s] = conv2d(_concat_or_single(parts), net.conv(f"block{d}.s{s}.input"))

    outputs: dict[int, Tensor] = {}
    for s in reversed(cfg.scales):
        h = inputs[s]
        for r in range(1, cfg.resblocks + 1):
            h = residual_block(h, net.conv(f"block{d}.s{s}.res{r}.conv1"), net.conv(f"block{d}.s{s}.res{r}.conv2"))
        if s + 2 in outputs:
            h = add(h, conv2d_transpose(outputs[s + 2], net.conv(f"block{d}.s{s + 2}.up"), stride=2))
        outputs[s] = conv2d(h, net.conv(f"block{d}.s{s}.output"))
    return {s: outputs[s] for s in cfg.scales}


def fusion_forward(net: Network, f2: Tensor, state: BlockState) -> Tensor:
    if state.completed != net.config.blocks:
        raise ValueError(f"fusion needs all {net.config.blocks} block outputs, state holds {state.completed}")
    return conv2d(concat_channels([f2] + state.outputs[0]), net.conv("fusion"))


def forward(net: Network, x: Tensor, detach_blocks: bool = False) -> Tensor:
    """Restore a 1-channel batch; output keeps the input extents.

    ``detach_blocks`` cuts every block output from the graph, leaving only the
    shallow / fusion / reconstruction path differentiable.
    """
    cfg = net.config
    if x.data.ndim != 4:
        raise ShapeError(f"network input must be 4-D (N, 1, H, W), got shape {x.shape}")
    h, w = x.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(
            f"input extents {h}x{w} must be divisible by {cfg.divisor} for scales {cfg.scales}"
        )
    f1, f2 = shallow_forward(net, x)
    state = BlockState()
    for d in range(1, cfg.blocks + 1):
        out = csrb_forward(net, d, f2, state)
        if detach_blocks:
            out = {s: t.detach() for s, t in out.items()}
        state.append(out)
    hff = fusion_forward(net, f2, state)
    r = relu(_conv_same(add(hff, f1), net.conv("rec1")))
    return _conv_same(r, net.conv("rec2"))


def predict(net: Network, planes: np.ndarray) -> np.ndarray:
    """Run the network on [0, 255] planes shaped (N, H, W) or (H, W); returns the same scale."""
    arr = np.asarray(planes, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    x = Tensor((arr / 255.0)[:, None], dtype=net.dtype)
    y = forward(net, x).data[:, 0].astype(np.float64) * 255.0
    return y[0] if squeeze else y


def restore_plane(net: Network, plane: np.ndarray) -> np.ndarray:
    """:func:`predict` on one plane of any extent: edge-pad to the required multiple, then crop."""
    h, w = plane.shape
    k = net.config.divisor
    ph, pw = -h % k, -w % k
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return predict(net, plane)[:h, :w]


VARIANTS = ("1S", "2S", "3S", "Dense", "D4R6", "D6R6", "D8R6")
_ALIASES = {"B4R6": "D4R6", "B6R6": "D6R6", "B8R6": "D8R6"}


def make_variant(name: str, blocks: int | None = None, resblocks: int | None = None) -> NetConfig:
    """Named ablation / depth variant; ``blocks``/``resblocks`` override D and R."""
    key = _ALIASES.get(name, name)
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    if key in ("1S", "2S", "3S"):
        scales, dense, d, r = LEGAL_SCALES[int(key[0]) - 1], False, 8, 6
    elif key == "Dense":
        scales, dense, d, r = (0, 2, 4), True, 8, 6
    else:
        scales, dense, d, r = (0, 2, 4), True, int(key[1]), int(key[3])
    return NetConfig(
        blocks=d if blocks is None else blocks,
        resblocks=r if resblocks is None else resblocks,
        scales=scales,
        dense=dense,
    )


def count_params(net: Network | NetConfig) -> int:
    cfg = net.config if isinstance(net, Network) else net
    return sum(math.prod(shape) for _, shape in manifest(cfg))


def zero_block_params(net: Network, layers: Iterable[str] | None = None) -> Network:
    """Copy of ``net`` with every ``block*`` parameter (or the named layers) set to zero."""
    arrays = {}
    for k, v in net.params.items():
        layer = k.rsplit(".", 1)[0]
        hit = k.startswith("block") if layers is None else layer in set(layers)
        arrays[k] = np.zeros_like(v.data) if hit else v.data
    return net.with_params(arrays)
