"""Hand-designed desk-scale filter bank.

Three conv/relu/pool stages ending in a 32-filter conv layer.  Every weight
is a fixed constant below: oriented edges at four angles in both polarities,
center-surround blobs, color-opponent channels, and a final layer of energy,
conjunction, suppression, and corner detectors.  Nothing is randomized, so
two constructions are always bit-identical.
"""
from __future__ import annotations

import numpy as np

from .kernels import ConvKernel, ShapeError
from .backbone import BackboneSpec, ConvLayer, MaxPoolLayer, ReluLayer

# 3x3 bases on luminance; all zero-sum so a flat image produces zero response.
_SOBEL_H = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float32) / 4.0
_SOBEL_V = _SOBEL_H.T.copy()
_DIAG_1 = np.array([[-2, -1, 0], [-1, 0, 1], [0, 1, 2]], dtype=np.float32) / 4.0
_DIAG_2 = np.fliplr(_DIAG_1).copy()
_BLOB = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=np.float32) / 8.0
_BOX = np.ones((3, 3), dtype=np.float32) / 9.0

# Stage-1 channel roles (12 channels):
# 0 h+  1 h-  2 v+  3 v-  4 d1+  5 d1-  6 d2+  7 d2-  8 blob+  9 blob-  10 RG  11 BY
_S1_BASES = [_SOBEL_H, -_SOBEL_H, _SOBEL_V, -_SOBEL_V, _DIAG_1, -_DIAG_1,
             _DIAG_2, -_DIAG_2, _BLOB, -_BLOB]


def _stage1_kernel() -> ConvKernel:
    w = np.zeros((12, 3, 3, 3), dtype=np.float32)
    for o, base in enumerate(_S1_BASES):
        for c in range(3):  # luminance: average over color channels
            w[o, c] = base / 3.0
    w[10, 0] = _BOX          # red - green opponent
    w[10, 1] = -_BOX
    w[11, 0] = _BOX / 2.0    # yellow - blue opponent
    w[11, 1] = _BOX / 2.0
    w[11, 2] = -_BOX
    return ConvKernel(weights=w, biases=np.zeros(12, np.float32), stride=1, padding=1)


def _stage2_kernel() -> ConvKernel:
    # Smoothed pass-through of every stage-1 channel, plus pooled orientation
    # energies.  Channels: 0..11 as stage 1; 12 hE, 13 vE, 14 dE, 15 blobE.
    w = np.zeros((16, 12, 3, 3), dtype=np.float32)
    for i in range(12):
        w[i, i] = _BOX
    for c in (0, 1):
        w[12, c] = _BOX / 2.0
    for c in (2, 3):
        w[13, c] = _BOX / 2.0
    for c in (4, 5, 6, 7):
        w[14, c] = _BOX / 4.0
    for c in (8, 9):
        w[15, c] = _BOX / 2.0
    return ConvKernel(weights=w, biases=np.zeros(16, np.float32), stride=1, padding=1)


def _stage3_kernel() -> ConvKernel:
    # Final 32 filters over stage-2 channels.  Each entry below is
    # (channel, coefficient) applied as a 3x3 box unless noted.
    combos = {
        0: [(12, 1.0)],                       # horizontal-edge energy
        1: [(13, 1.0)],                       # vertical-edge energy
        2: [(14, 1.0)],                       # diagonal energy
        3: [(15, 1.0)],                       # blob energy
        4: [(0, 1.0)],                        # bright-below horizontal edge
        5: [(1, 1.0)],
        6: [(2, 1.0)],
        7: [(3, 1.0)],
        8: [(4, 0.5), (5, 0.5)],              # diag-1 energy
        9: [(6, 0.5), (7, 0.5)],              # diag-2 energy
        10: [(8, 1.0)],                       # bright blob
        11: [(9, 1.0)],                       # dark blob
        12: [(10, 1.0)],                      # red-green
        13: [(11, 1.0)],                      # yellow-blue
        14: [(12, 1.0), (13, 1.0), (14, -1.0)],   # axis-aligned conjunction, diag suppressed
        15: [(12, 0.5), (13, 0.5), (14, 0.5)],    # all-orientation energy
        16: [(4, 0.5), (5, 0.5), (6, 0.5), (7, 0.5), (12, -0.5), (13, -0.5)],  # diag-only
        17: [(12, 1.0), (13, -1.0)],          # horizontal edges, vertical suppressed
        18: [(13, 1.0), (12, -1.0)],
        19: [(4, 0.5), (5, 0.5), (6, -0.5), (7, -0.5)],   # diag-1, diag-2 suppressed
        20: [(6, 0.5), (7, 0.5), (4, -0.5), (5, -0.5)],
        21: [(12, 0.4), (13, 0.4), (14, 0.4), (9, 0.4)],  # ring: edges around a darker center
        27: [(15, 0.5), (12, 0.3), (13, 0.3), (14, 0.3)],  # blobs with edges
        28: [(10, 0.7), (12, 0.3), (13, 0.3)],             # colored edges
        29: [(11, 0.7), (15, 0.3)],                        # colored blobs
        30: [(12, 0.25), (13, 0.25), (14, 0.25), (15, 0.25)],  # total energy
        31: [(1, 0.5), (3, 0.5)],                          # dark bars
    }
    w = np.zeros((32, 16, 3, 3), dtype=np.float32)
    for o, terms in combos.items():
        for c, coeff in terms:
            w[o, c] = coeff * _BOX
    # 22..25: corner detectors, horizontal energy on one half of the window
    # and vertical energy on the adjacent half, one filter per orientation.
    halves = {
        22: ((0, 1, 0, 3), (0, 3, 0, 1)),  # top + left
        23: ((0, 1, 0, 3), (0, 3, 2, 3)),  # top + right
        24: ((2, 3, 0, 3), (0, 3, 0, 1)),  # bottom + left
        25: ((2, 3, 0, 3), (0, 3, 2, 3)),  # bottom + right
    }
    for o, (hband, vband) in halves.items():
        r0, r1, c0, c1 = hband
        w[o, 12, r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
        r0, r1, c0, c1 = vband
        w[o, 13, r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
    # 26: co-located axis conjunction at the center cell only.
    w[26, 12, 1, 1] = 1.0
    w[26, 13, 1, 1] = 1.0
    return ConvKernel(weights=w, biases=np.zeros(32, np.float32), stride=1, padding=1)


def builtin_filterbank(input_size, input_channels: int = 3) -> BackboneSpec:
    """Deterministic 3-stage backbone with 32 final filters.

    input_size is (height, width); both must be at least 32.
    """
    h, w = input_size
    if h < 32 or w < 32:
        raise ShapeError(f"builtin filter bank needs input of at least 32x32, got {h}x{w}")
    if input_channels != 3:
        raise ShapeError("builtin filter bank expects 3-channel input")
    layers = (
        ConvLayer(_stage1_kernel()),
        ReluLayer(),
        MaxPoolLayer(window=2, stride=2),
        ConvLayer(_stage2_kernel()),
        ReluLayer(),
        MaxPoolLayer(window=2, stride=2),
        ConvLayer(_stage3_kernel()),
    )
    return BackboneSpec(layers=layers, input_channels=3, input_height=h, input_width=w)
