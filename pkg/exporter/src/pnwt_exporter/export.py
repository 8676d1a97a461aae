"""Export a torchvision model's convolutional stack to a PNWT weight file.

Only the conv stack is exported (the downstream consumer never uses the
classifier head): the model's feature layers are walked in order, the stack
is truncated after the last convolution, and anything that is not plain
Conv2d / ReLU / MaxPool2d is rejected with an explicit error.

Alongside the PNWT file the exporter writes a probe image and a manifest
recording the probe's final-layer pooled values computed in torch, so a
PNWT consumer can validate its own forward pass against the source
framework.  Before the manifest is written the PNWT bytes are re-parsed by
an independent struct-level reader and compared against the source layers.

PNWT byte layout: magic "PNWT", u32 version=1, u32 layer_count; per layer a
u8 kind (0 conv, 1 relu, 2 maxpool); conv: u32 out,in,kh,kw,stride,pad then
little-endian f32 weights then biases; maxpool: u32 window, stride.
"""
from __future__ import annotations

import argparse
import os
import struct
import sys
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torchvision.models as tvm

MAGIC = b"PNWT"
VERSION = 1
KIND_CONV, KIND_RELU, KIND_POOL = 0, 1, 2

MODELS = {
    "alexnet": tvm.alexnet,
    "vgg11": tvm.vgg11,
    "vgg13": tvm.vgg13,
    "vgg16": tvm.vgg16,
    "vgg19": tvm.vgg19,
}


class UnsupportedLayerError(ValueError):
    """A feature layer cannot be expressed in PNWT."""


@dataclass
class ExportManifest:
    source: str
    weights_origin: str      # "pretrained" or "random"
    pnwt_path: str
    probe_path: str
    input_size: int
    layers: list             # the exported layer descriptions
    pooled: np.ndarray       # torch-side pooled final-layer values


def _pair(value, what):
    if isinstance(value, (tuple, list)):
        a, b = value
        if a != b:
            raise UnsupportedLayerError(f"{what} must be symmetric, got {value}")
        return int(a)
    return int(value)


def conv_stack(model: nn.Module):
    """Flatten model.features into PNWT-expressible layer descriptions,
    truncated after the last convolution."""
    if not hasattr(model, "features"):
        raise UnsupportedLayerError(f"{type(model).__name__} has no conv feature stack")
    layers = []
    for module in model.features:
        if isinstance(module, nn.Conv2d):
            if module.groups != 1:
                raise UnsupportedLayerError(f"grouped convolution not supported: {module}")
            if _pair(module.dilation, "dilation") != 1:
                raise UnsupportedLayerError(f"dilated convolution not supported: {module}")
            weights = module.weight.detach().cpu().numpy().astype(np.float32)
            if module.bias is not None:
                biases = module.bias.detach().cpu().numpy().astype(np.float32)
            else:
                biases = np.zeros(weights.shape[0], dtype=np.float32)
            layers.append(("conv", weights, biases,
                           _pair(module.stride, "stride"), _pair(module.padding, "padding")))
        elif isinstance(module, nn.ReLU):
            layers.append(("relu",))
        elif isinstance(module, nn.MaxPool2d):
            if _pair(module.padding, "pool padding") != 0:
                raise UnsupportedLayerError(f"padded pooling not supported: {module}")
            if _pair(module.dilation, "pool dilation") != 1:
                raise UnsupportedLayerError(f"dilated pooling not supported: {module}")
            layers.append(("maxpool", _pair(module.kernel_size, "pool window"),
                           _pair(module.stride, "pool stride")))
        else:
            raise UnsupportedLayerError(
                f"unsupported layer type {type(module).__name__}: {module}")
    while layers and layers[-1][0] != "conv":
        layers.pop()  # the consumer pools the last conv map; drop trailing relu/pool
    if not layers:
        raise UnsupportedLayerError("feature stack contains no convolution")
    return layers


def write_pnwt(path, layers):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(layers)))
        for layer in layers:
            if layer[0] == "conv":
                _, weights, biases, stride, pad = layer
                out_c, in_c, kh, kw = weights.shape
                fh.write(struct.pack("<B", KIND_CONV))
                fh.write(struct.pack("<6I", out_c, in_c, kh, kw, stride, pad))
                fh.write(np.ascontiguousarray(weights, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(biases, dtype="<f4").tobytes())
            elif layer[0] == "relu":
                fh.write(struct.pack("<B", KIND_RELU))
            else:
                fh.write(struct.pack("<B", KIND_POOL))
                fh.write(struct.pack("<II", layer[1], layer[2]))


def read_pnwt_structs(path):
    """Independent struct-level reader used to verify the written bytes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"bad version {version}")
    off = 12
    layers = []
    for _ in range(count):
        kind = data[off]
        off += 1
        if kind == KIND_CONV:
            out_c, in_c, kh, kw, stride, pad = struct.unpack_from("<6I", data, off)
            off += 24
            n = out_c * in_c * kh * kw
            weights = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(
                out_c, in_c, kh, kw)
            off += 4 * n
            biases = np.frombuffer(data, dtype="<f4", count=out_c, offset=off)
            off += 4 * out_c
            layers.append(("conv", weights, biases, stride, pad))
        elif kind == KIND_RELU:
            layers.append(("relu",))
        elif kind == KIND_POOL:
            window, stride = struct.unpack_from("<II", data, off)
            off += 8
            layers.append(("maxpool", window, stride))
        else:
            raise ValueError(f"unknown layer kind {kind}")
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes")
    return layers


def _verify_roundtrip(path, layers):
    back = read_pnwt_structs(path)
    if len(back) != len(layers):
        raise ValueError(f"roundtrip layer count {len(back)} != {len(layers)}")
    for li, (a, b) in enumerate(zip(layers, back)):
        if a[0] != b[0]:
            raise ValueError(f"layer {li}: kind {b[0]} != {a[0]}")
        if a[0] == "conv":
            if not (np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])
                    and a[3:] == b[3:]):
                raise ValueError(f"layer {li}: conv payload mismatch after roundtrip")
        elif a[0] == "maxpool" and a[1:] != b[1:]:
            raise ValueError(f"layer {li}: pool payload mismatch after roundtrip")


def probe_image(input_size: int, seed: int = 0) -> np.ndarray:
    """Deterministic 8-bit probe pattern as a (3, s, s) float array in [0, 1]."""
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 256, size=(3, input_size, input_size), dtype=np.uint8)
    return raw.astype(np.float32) / 255.0


def write_ppm(path, image):
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.moveaxis(data, 0, 2).tobytes())


def torch_forward_pooled(layers, image: np.ndarray) -> np.ndarray:
    """Run the exported stack in torch and globally max-pool the final map."""
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).unsqueeze(0)
    with torch.no_grad():
        for layer in layers:
            if layer[0] == "conv":
                _, weights, biases, stride, pad = layer
                x = torch.nn.functional.conv2d(
                    x, torch.from_numpy(weights), torch.from_numpy(biases),
                    stride=stride, padding=pad)
            elif layer[0] == "relu":
                x = torch.relu(x)
            else:
                x = torch.nn.functional.max_pool2d(x, layer[1], stride=layer[2])
        pooled = torch.amax(x, dim=(2, 3))[0]
    return pooled.numpy().astype(np.float64)


def write_manifest(path, manifest: ExportManifest):
    lines = ["PNWTEXPORT 1",
             f"source {manifest.source}",
             f"weights {manifest.weights_origin}",
             f"pnwt {manifest.pnwt_path}",
             f"probe {manifest.probe_path}",
             f"input 3 {manifest.input_size} {manifest.input_size}"]
    for layer in manifest.layers:
        if layer[0] == "conv":
            _, weights, _, stride, pad = layer
            out_c, in_c, kh, kw = weights.shape
            lines.append(f"layer conv {out_c} {in_c} {kh} {kw} stride {stride} pad {pad}")
        elif layer[0] == "relu":
            lines.append("layer relu")
        else:
            lines.append(f"layer maxpool {layer[1]} {layer[2]}")
    lines.append("pooled " + " ".join(f"{v:.9g}" for v in manifest.pooled))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "PNWTEXPORT 1":
        raise ValueError(f"bad export manifest header in {path}")
    out = {"layers": []}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key == "layer":
            out["layers"].append(rest.split())
        elif key == "pooled":
            out["pooled"] = np.array([float(v) for v in rest.split()])
        elif key == "input":
            out["input"] = tuple(int(v) for v in rest.split())
        else:
            out[key] = rest
    n_filters = next(int(l[1]) for l in reversed(out["layers"]) if l[0] == "conv")
    if len(out.get("pooled", ())) != n_filters:
        raise ValueError("probe output length does not match exported filter count")
    return out


def export(model_id: str, out_dir, pretrained: bool = True, input_size: int = 224,
           seed: int = 0) -> ExportManifest:
    """Export one model's conv stack; returns the manifest that was written.

    With pretrained=True the torchvision weights are downloaded; if that
    fails (no network) the export falls back to seeded random init so the
    parity probe still exercises the real architecture.
    """
    if model_id not in MODELS:
        raise ValueError(f"unknown model {model_id!r}, supported: {sorted(MODELS)}")
    origin = "random"
    if pretrained:
        try:
            model = MODELS[model_id](weights="DEFAULT")
            origin = "pretrained"
        except Exception as exc:
            print(f"warning: pretrained weights unavailable ({exc}); "
                  "falling back to seeded random init", file=sys.stderr)
    if origin == "random":
        torch.manual_seed(seed)
        model = MODELS[model_id](weights=None)
    model.eval()
    layers = conv_stack(model)
    os.makedirs(out_dir, exist_ok=True)
    pnwt_path = os.path.join(out_dir, f"{model_id}.pnwt")
    probe_path = os.path.join(out_dir, "probe.ppm")
    write_pnwt(pnwt_path, layers)
    _verify_roundtrip(pnwt_path, layers)
    probe = probe_image(input_size, seed=seed)
    write_ppm(probe_path, probe)
    pooled = torch_forward_pooled(layers, probe)
    manifest = ExportManifest(
        source=model_id, weights_origin=origin, pnwt_path=os.path.basename(pnwt_path),
        probe_path=os.path.basename(probe_path), input_size=input_size,
        layers=layers, pooled=pooled,
    )
    write_manifest(os.path.join(out_dir, "export.txt"), manifest)
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pnwt-export",
        description="Export a torchvision conv stack to a PNWT weight file")
    parser.add_argument("--model", required=True, choices=sorted(MODELS))
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--input-size", type=int, default=224)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--random-init", action="store_true",
                        help="skip pretrained weights and use seeded random init")
    ns = parser.parse_args(argv)
    try:
        manifest = export(ns.model, ns.out, pretrained=not ns.random_init,
                          input_size=ns.input_size, seed=ns.seed)
    except (UnsupportedLayerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"exported {manifest.source} ({manifest.weights_origin}) -> "
          f"{manifest.pnwt_path}: {len(manifest.layers)} layers, "
          f"{len(manifest.pooled)} filters")
    return 0


if __name__ == "__main__":
    sys.exit(main())
