"""Frozen convolutional backbone: layer stack, traced forward pass, and the
PNWT binary weight format.

A backbone is an immutable sequence of conv / relu / maxpool layers whose
final layer is a convolution; its output map feeds a global max pool whose
per-filter values and argmax locations are recorded in the forward trace.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from .kernels import (
    ConvKernel,
    PoolSwitches,
    ShapeError,
    conv2d_forward,
    conv_output_shape,
    global_max_pool,
    maxpool2d,
    relu,
)


class WeightFormatError(ValueError):
    """Base for PNWT parse failures."""


class BadMagicError(WeightFormatError):
    pass


class BadVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class LayerShapeError(WeightFormatError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    kernel: ConvKernel


@dataclass(frozen=True)
class ReluLayer:
    pass


@dataclass(frozen=True)
class MaxPoolLayer:
    window: int
    stride: int


@dataclass(frozen=True)
class BackboneSpec:
    """Ordered layer stack plus the declared input geometry.

    Shape-checks the whole chain at construction time and requires the final
    layer to be a convolution.
    """

    layers: tuple
    input_channels: int
    input_height: int
    input_width: int

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("backbone needs at least one layer")
        if not isinstance(self.layers[-1], ConvLayer):
            raise ShapeError("final backbone layer must be a convolution")
        object.__setattr__(self, "layers", tuple(self.layers))
        self.layer_shapes()  # raises on any chain mismatch

    def layer_shapes(self):
        """Output shape (c, h, w) after each layer for the declared input."""
        c, h, w = self.input_channels, self.input_height, self.input_width
        shapes = []
        for li, layer in enumerate(self.layers):
            if isinstance(layer, ConvLayer):
                k = layer.kernel
                if c != k.in_channels:
                    raise ShapeError(
                        f"layer {li}: conv expects {k.in_channels} channels, chain provides {c}"
                    )
                h, w = conv_output_shape(h, w, k.kernel_h, k.kernel_w, k.stride, k.padding)
                c = k.out_channels
            elif isinstance(layer, MaxPoolLayer):
                if layer.window > h or layer.window > w:
                    raise ShapeError(f"layer {li}: pooling window {layer.window} larger than {h}x{w}")
                h = (h - layer.window) // layer.stride + 1
                w = (w - layer.window) // layer.stride + 1
            elif isinstance(layer, ReluLayer):
                pass
            else:
                raise ShapeError(f"layer {li}: unknown layer type {type(layer).__name__}")
            if h <= 0 or w <= 0:
                raise ShapeError(f"layer {li}: non-positive output shape ({h}, {w})")
            shapes.append((c, h, w))
        return shapes

    @property
    def n_filters(self) -> int:
        """Output channel count of the final conv layer."""
        return self.layers[-1].kernel.out_channels

    @property
    def final_map_size(self):
        c, h, w = self.layer_shapes()[-1]
        return h, w

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                s *= layer.kernel.stride
            elif isinstance(layer, MaxPoolLayer):
                s *= layer.stride
        return s

    @property
    def receptive_field(self) -> int:
        """Side length, in input pixels, of one final-layer cell's receptive field."""
        rf, j = 1, 1
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                rf += (layer.kernel.kernel_h - 1) * j
                j *= layer.kernel.stride
            elif isinstance(layer, MaxPoolLayer):
                rf += (layer.window - 1) * j
                j *= layer.stride
        return rf

    def fingerprint(self) -> str:
        return hashlib.sha256(serialize_weights(self)).hexdigest()[:16]

    def describe(self) -> str:
        lines = [f"input {self.input_channels}x{self.input_height}x{self.input_width}"]
        shapes = self.layer_shapes()
        for li, (layer, (c, h, w)) in enumerate(zip(self.layers, shapes)):
            if isinstance(layer, ConvLayer):
                k = layer.kernel
                desc = (
                    f"conv {k.out_channels}x{k.in_channels}x{k.kernel_h}x{k.kernel_w} "
                    f"stride={k.stride} pad={k.padding}"
                )
            elif isinstance(layer, MaxPoolLayer):
                desc = f"maxpool window={layer.window} stride={layer.stride}"
            else:
                desc = "relu"
            lines.append(f"layer {li}: {desc} -> {c}x{h}x{w}")
        h, w = self.final_map_size
        lines.append(f"filters {self.n_filters} map {h}x{w} stride {self.total_stride} rf {self.receptive_field}")
        return "\n".join(lines)


@dataclass
class ForwardTrace:
    """Everything one forward pass produced: the input, every layer's output
    map, pooling switches, and the final global-max values and locations."""

    image: np.ndarray
    outputs: list          # per-layer feature maps
    switches: dict         # layer index -> PoolSwitches
    pooled_values: np.ndarray   # (n_filters,)
    pooled_argmax: np.ndarray   # (n_filters, 2)
    backbone_fingerprint: str


def forward(spec: BackboneSpec, image: np.ndarray) -> ForwardTrace:
    image = np.asarray(image, dtype=np.float32)
    expected = (spec.input_channels, spec.input_height, spec.input_width)
    if image.shape != expected:
        raise ShapeError(f"image shape {image.shape} does not match backbone input {expected}")
    x = image
    outputs = []
    switches = {}
    for li, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayer):
            x = conv2d_forward(x, layer.kernel)
        elif isinstance(layer, ReluLayer):
            x = relu(x)
        else:
            x, sw = maxpool2d(x, layer.window, layer.stride)
            switches[li] = sw
        outputs.append(x)
    values, argmax = global_max_pool(x)
    return ForwardTrace(
        image=image,
        outputs=outputs,
        switches=switches,
        pooled_values=values,
        pooled_argmax=argmax,
        backbone_fingerprint=spec.fingerprint(),
    )


# PNWT byte layout: magic "PNWT", u32 version=1, u32 layer_count; per layer a
# u8 kind (0 conv, 1 relu, 2 maxpool); conv: u32 out,in,kh,kw,stride,pad then
# little-endian f32 weights then biases; maxpool: u32 window, stride.

_MAGIC = b"PNWT"
_VERSION = 1
_KIND_CONV, _KIND_RELU, _KIND_POOL = 0, 1, 2


def serialize_weights(spec: BackboneSpec) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(spec.layers)))
    for layer in spec.layers:
        if isinstance(layer, ConvLayer):
            k = layer.kernel
            buf.write(struct.pack("<B", _KIND_CONV))
            buf.write(struct.pack("<6I", k.out_channels, k.in_channels, k.kernel_h, k.kernel_w, k.stride, k.padding))
            buf.write(np.ascontiguousarray(k.weights, dtype="<f4").tobytes())
            buf.write(np.ascontiguousarray(k.biases, dtype="<f4").tobytes())
        elif isinstance(layer, ReluLayer):
            buf.write(struct.pack("<B", _KIND_RELU))
        else:
            buf.write(struct.pack("<B", _KIND_POOL))
            buf.write(struct.pack("<II", layer.window, layer.stride))
    return buf.getvalue()


def save_weights(spec: BackboneSpec, path):
    with open(path, "wb") as fh:
        fh.write(serialize_weights(spec))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"file ends inside {what} (wanted {n} bytes, got {len(data)})")
    return data


def deserialize_layers(fh):
    """Parse the PNWT stream into a layer tuple (no geometry attached)."""
    magic = fh.read(4)
    if magic != _MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    version, layer_count = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != _VERSION:
        raise BadVersionError(f"unsupported version {version}")
    layers = []
    for li in range(layer_count):
        (kind,) = struct.unpack("<B", _read_exact(fh, 1, f"layer {li} kind"))
        if kind == _KIND_CONV:
            out_c, in_c, kh, kw, stride, pad = struct.unpack(
                "<6I", _read_exact(fh, 24, f"layer {li} conv header")
            )
            n = out_c * in_c * kh * kw
            wbytes = _read_exact(fh, 4 * n, f"layer {li} weights")
            bbytes = _read_exact(fh, 4 * out_c, f"layer {li} biases")
            weights = np.frombuffer(wbytes, dtype="<f4").reshape(out_c, in_c, kh, kw)
            biases = np.frombuffer(bbytes, dtype="<f4")
            try:
                kernel = ConvKernel(weights=weights, biases=biases, stride=stride, padding=pad)
            except ShapeError as exc:
                raise LayerShapeError(f"layer {li}: {exc}") from exc
            layers.append(ConvLayer(kernel))
        elif kind == _KIND_RELU:
            layers.append(ReluLayer())
        elif kind == _KIND_POOL:
            window, stride = struct.unpack("<II", _read_exact(fh, 8, f"layer {li} pool header"))
            layers.append(MaxPoolLayer(window=window, stride=stride))
        else:
            raise WeightFormatError(f"layer {li}: unknown layer kind {kind}")
    trailing = fh.read(1)
    if trailing:
        raise WeightFormatError("trailing bytes after final layer")
    return tuple(layers)


def load_weights(path, input_size, input_channels=None) -> BackboneSpec:
    """Load a PNWT file and attach the declared input geometry.

    input_channels defaults to the first conv layer's input channel count.
    """
    with open(path, "rb") as fh:
        layers = deserialize_layers(fh)
    if input_channels is None:
        for layer in layers:
            if isinstance(layer, ConvLayer):
                input_channels = layer.kernel.in_channels
                break
        else:
            raise LayerShapeError("backbone has no conv layer")
    h, w = input_size
    try:
        return BackboneSpec(
            layers=layers, input_channels=input_channels, input_height=h, input_width=w
        )
    except ShapeError as exc:
        raise LayerShapeError(str(exc)) from exc
