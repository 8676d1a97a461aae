"""Deconvolution-based localization: walk the backbone in reverse from a
single filter's global-max cell back to input pixels, threshold the
attribution into a region, intersect regions across a pattern's filters,
and report the bounding box.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneSpec, ConvLayer, ForwardTrace, MaxPoolLayer, ReluLayer, forward
from .kernels import ConvKernel, ShapeError, conv_output_shape, unpool2d
from .mining import VisualPattern, binarize, detect


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, inclusive-exclusive on both axes."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def conv2d_backward_input(grad_out: np.ndarray, kernel: ConvKernel, in_shape) -> np.ndarray:
    """Gradient of conv2d_forward with respect to its input: a transposed
    convolution with the same kernel, scattered back through stride and
    padding."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    c_in, h, w = in_shape
    if grad_out.shape[0] != kernel.out_channels:
        raise ShapeError(
            f"gradient has {grad_out.shape[0]} channels, kernel produces {kernel.out_channels}"
        )
    kh, kw = kernel.kernel_h, kernel.kernel_w
    s, p = kernel.stride, kernel.padding
    ho, wo = grad_out.shape[1:]
    expect = conv_output_shape(h, w, kh, kw, s, p)
    if (ho, wo) != expect:
        raise ShapeError(f"gradient spatial shape {(ho, wo)} does not match conv output {expect}")
    w64 = kernel.weights.astype(np.float64)
    padded = np.zeros((c_in, h + 2 * p, w + 2 * p), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            # grad_in[c, y*s + i, x*s + j] += sum_o grad_out[o, y, x] * w[o, c, i, j]
            contrib = np.einsum("ohw,oc->chw", grad_out, w64[:, :, i, j])
            padded[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib
    return padded[:, p:p + h, p:p + w]


def _layer_input_shape(trace: ForwardTrace, layer_index: int):
    if layer_index == 0:
        return trace.image.shape
    return trace.outputs[layer_index - 1].shape


def deconv_filter_raw(trace: ForwardTrace, spec: BackboneSpec, filter_index: int,
                      seed_value=None) -> np.ndarray:
    """Signed multi-channel attribution of one final-layer filter.

    Seeds the filter's global-max cell with seed_value (default: the pooled
    activation itself) and walks the stack in reverse: transposed convolution
    for conv layers, switch-based unpooling for max pools, and pass-through
    for ReLU.
    """
    if trace.backbone_fingerprint != spec.fingerprint():
        raise ShapeError("forward trace was produced by a different backbone")
    if not 0 <= filter_index < spec.n_filters:
        raise IndexError(f"filter index {filter_index} outside [0, {spec.n_filters})")
    final = trace.outputs[-1]
    if seed_value is None:
        seed_value = float(trace.pooled_values[filter_index])
    g = np.zeros(final.shape, dtype=np.float64)
    r, c = trace.pooled_argmax[filter_index]
    g[filter_index, r, c] = seed_value
    for li in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[li]
        if isinstance(layer, ConvLayer):
            g = conv2d_backward_input(g, layer.kernel, _layer_input_shape(trace, li))
        elif isinstance(layer, MaxPoolLayer):
            g = unpool2d(g.astype(np.float32), trace.switches[li]).astype(np.float64)
        elif isinstance(layer, ReluLayer):
            pass  # positive values pass unchanged; the reverse pass keeps them all
    return g


def deconv_filter(trace: ForwardTrace, spec: BackboneSpec, filter_index: int) -> np.ndarray:
    """Single-channel attribution magnitude: channel-summed absolute values
    of the raw deconvolution output, with the input image's spatial dims."""
    raw = deconv_filter_raw(trace, spec, filter_index)
    return np.abs(raw).sum(axis=0)


def region_of(dmap: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Boolean support mask: pixels whose magnitude exceeds tau times the
    map's maximum magnitude.  An all-zero map yields an empty region."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    m = np.abs(np.asarray(dmap, dtype=np.float64))
    peak = m.max() if m.size else 0.0
    if peak == 0.0:
        return np.zeros(m.shape, dtype=bool)
    return m > tau * peak


def intersect_regions(regions) -> np.ndarray:
    regions = list(regions)
    if not regions:
        raise ValueError("need at least one region")
    out = np.asarray(regions[0], dtype=bool)
    for r in regions[1:]:
        r = np.asarray(r, dtype=bool)
        if r.shape != out.shape:
            raise ShapeError(f"region shape {r.shape} does not match {out.shape}")
        out = out & r
    return out


def bbox_of(region: np.ndarray):
    """Tight box around a mask's true pixels, or None for an empty mask."""
    region = np.asarray(region, dtype=bool)
    rows, cols = np.nonzero(region)
    if rows.size == 0:
        return None
    return BBox(
        x_min=int(cols.min()), y_min=int(rows.min()),
        x_max=int(cols.max()) + 1, y_max=int(rows.max()) + 1,
    )


def localize_pattern(image: np.ndarray, spec: BackboneSpec, pattern: VisualPattern,
                     thresholds: np.ndarray, tau: float = 0.1, trace: ForwardTrace = None):
    """Localize one pattern in one image.

    Runs the forward pass (or reuses a supplied trace), gates on the pattern
    being detected in the image's activation profile, deconvolves each member
    filter, and intersects their regions.  Returns (region, bbox) or None
    when the pattern is not detected or the intersection is empty.
    """
    if trace is None:
        trace = forward(spec, image)
    profile = binarize(trace.pooled_values, thresholds)
    if not detect(pattern, profile):
        return None
    regions = [region_of(deconv_filter(trace, spec, f), tau=tau) for f in pattern.filters]
    merged = intersect_regions(regions)
    box = bbox_of(merged)
    if box is None:
        return None
    return merged, box
