"""Dense and convolutional building blocks on top of the autodiff core.

MLPs use silu on hidden layers and a linear output layer. The conv embedder
turns a (C, H, W) image grid into a flat embedding vector through strided
valid convolutions followed by one dense layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

PARAMS_FORMAT = "permflow-params-v1"


@dataclass
class MLPParams:
    """Affine layers (W stored input-major: x @ W + b)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[1]


@dataclass
class ConvEmbedParams:
    """Strided valid conv stack (kernels (k, k, c_in, c_out)) plus a dense head."""

    convs: list[tuple[np.ndarray, np.ndarray]]
    dense: tuple[np.ndarray, np.ndarray]
    stride: int = 2
    in_shape: tuple[int, int, int] = (1, 32, 32)  # (C, H, W)

    @property
    def embed_width(self) -> int:
        return self.dense[0].shape[1]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def mlp_init(rng: np.random.Generator, widths: list[int]) -> MLPParams:
    """widths = [in, hidden..., out]; biases start at zero."""
    layers = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers.append((_glorot(rng, a, b, (a, b)), np.zeros(b)))
    return MLPParams(layers)


def mlp_forward(p: MLPParams, x, inject=None) -> Var:
    """Affine-silu chain; ``inject`` is concatenated to the second layer's input.

    Raises ValueError on a width mismatch so callers see shape bugs eagerly.
    """
    h = ad.lift(x)
    if h.value.ndim != 2 or h.value.shape[1] != p.in_width:
        raise ValueError(f"mlp input width {h.value.shape} does not match {p.in_width}")
    for i, (W, b) in enumerate(p.layers):
        if i == 1 and inject is not None:
            h = ad.concat([h, ad.lift(inject)], axis=1)
        if h.value.shape[1] != W.shape[0]:
            raise ValueError(f"layer {i} expects width {W.shape[0]}, got {h.value.shape[1]}")
        h = ad.add(ad.matmul(h, ad.lift(W)), ad.lift(b))
        if i < len(p.layers) - 1:
            h = ad.silu(h)
    return h


def conv_embed_init(
    rng: np.random.Generator,
    in_shape: tuple[int, int, int],
    channels: list[int],
    embed_width: int,
    kernel: int = 3,
    stride: int = 2,
) -> ConvEmbedParams:
    c, h, w = in_shape
    convs = []
    cin = c
    for cout in channels:
        fan_in = kernel * kernel * cin
        convs.append((_glorot(rng, fan_in, cout, (kernel, kernel, cin, cout)), np.zeros(cout)))
        h = (h - kernel) // stride + 1
        w = (w - kernel) // stride + 1
        if h < 1 or w < 1:
            raise ValueError("conv stack shrinks the image below 1x1")
        cin = cout
    flat = h * w * cin
    dense = (_glorot(rng, flat, embed_width, (flat, embed_width)), np.zeros(embed_width))
    return ConvEmbedParams(convs, dense, stride, in_shape)


def conv_embed(p: ConvEmbedParams, image) -> Var:
    """Embed images of shape (C, H, W) or (B, C, H, W) into (B, h) vectors."""
    img = image.value if isinstance(image, Var) else np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.shape[1:] != p.in_shape:
        raise ValueError(f"image shape {img.shape[1:]} does not match configured {p.in_shape}")
    B = img.shape[0]
    h = ad.lift(np.moveaxis(img, 1, 3))  # channels-last
    for kern, bias in p.convs:
        k = kern.shape[0]
        cin, cout = kern.shape[2], kern.shape[3]
        _, H, W, _ = h.value.shape
        oh = (H - k) // p.stride + 1
        ow = (W - k) // p.stride + 1
        cols = ad.im2col(h, k, p.stride)
        kmat = ad.reshape(ad.lift(kern), (k * k * cin, cout))
        h = ad.add(ad.matmul(cols, kmat), ad.lift(bias))
        h = ad.silu(h)
        h = ad.reshape(h, (B, oh, ow, cout))
    flat = ad.reshape(h, (B, int(np.prod(h.value.shape[1:]))))
    W, b = p.dense
    return ad.add(ad.matmul(flat, ad.lift(W)), ad.lift(b))


# ---------------------------------------------------------------------------
# parameter flattening and serialization
# ---------------------------------------------------------------------------

def mlp_named_leaves(prefix: str, p: MLPParams) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, (W, b) in enumerate(p.layers):
        out.append((f"{prefix}.{i}.W", W))
        out.append((f"{prefix}.{i}.b", b))
    return out


def conv_named_leaves(prefix: str, p: ConvEmbedParams) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, (k, b) in enumerate(p.convs):
        out.append((f"{prefix}.conv{i}.k", k))
        out.append((f"{prefix}.conv{i}.b", b))
    out.append((f"{prefix}.dense.W", p.dense[0]))
    out.append((f"{prefix}.dense.b", p.dense[1]))
    return out


def params_to_doc(named: list[tuple[str, np.ndarray]]) -> dict:
    return {
        "format": PARAMS_FORMAT,
        "arrays": [
            {"name": n, "shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}
            for n, a in named
        ],
    }


def params_from_doc(doc: dict) -> dict[str, np.ndarray]:
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"unsupported parameter format: {doc.get('format')!r}")
    out = {}
    for entry in doc["arrays"]:
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out[entry["name"]] = arr
    return out


def save_params(path, named: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_doc(named), fh)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        return params_from_doc(json.load(fh))
