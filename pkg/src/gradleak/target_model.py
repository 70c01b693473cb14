"""The attacked classifier F(x, W) and the gradients it leaks."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as nnf

from .errors import ConfigError, LabelError, ShapeError
from .numerics import GradientVector, flatten_gradients

# Images are (C, H, W) tensors; batches are (N, C, H, W).


@dataclass(frozen=True)
class LabeledExample:
    image: torch.Tensor
    label: int
    example_id: str = ""


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


class TargetModel:
    """Declarative layer stack with an explicit weight map.

    The instance is treated as immutable: attacks never write to ``weights``.
    Supported layer kinds: ``conv`` (out_channels, kernel, stride, padding),
    ``sigmoid``, ``relu``, ``avgpool`` (kernel), ``flatten`` and ``dense`` (out_features).
    """

    def __init__(self, architecture, weights, input_shape, num_classes, name="custom"):
        self.architecture = [dict(layer) for layer in architecture]
        self.input_shape = tuple(int(s) for s in input_shape)  # (H, W, C)
        self.num_classes = int(num_classes)
        self.name = name
        self.weights = {k: v.detach() for k, v in weights.items()}
        expected = self.parameter_shapes()
        got = {k: tuple(v.shape) for k, v in self.weights.items()}
        if expected != got:
            raise ShapeError(f"weights do not match architecture: expected {expected}, got {got}")

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    @property
    def image_chw(self):
        h, w, c = self.input_shape
        return (c, h, w)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        h, w, c = self.input_shape
        shapes = {}
        flat = None
        for i, layer in enumerate(self.architecture):
            kind = layer["kind"]
            if kind == "conv":
                k = layer["kernel"]
                shapes[f"layer{i}.weight"] = (layer["out_channels"], c, k, k)
                shapes[f"layer{i}.bias"] = (layer["out_channels"],)
                h = _conv_out(h, k, layer.get("stride", 1), layer.get("padding", 0))
                w = _conv_out(w, k, layer.get("stride", 1), layer.get("padding", 0))
                c = layer["out_channels"]
            elif kind == "avgpool":
                h //= layer["kernel"]
                w //= layer["kernel"]
            elif kind == "flatten":
                flat = c * h * w
            elif kind == "dense":
                fan_in = flat if flat is not None else c * h * w
                shapes[f"layer{i}.weight"] = (layer["out_features"], fan_in)
                shapes[f"layer{i}.bias"] = (layer["out_features"],)
                flat = layer["out_features"]
            elif kind not in ("sigmoid", "relu"):
                raise ConfigError(f"unknown layer kind {kind!r}")
        if flat != self.num_classes:
            raise ShapeError(f"architecture ends with {flat} outputs, expected {self.num_classes}")
        return shapes

    def _check_input(self, x):
        if tuple(x.shape[-3:]) != self.image_chw or x.dim() not in (3, 4):
            raise ShapeError(f"expected image of shape {self.image_chw}, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor, weights=None) -> torch.Tensor:
        """Class scores for one image (C,H,W) -> (K,) or a batch (N,C,H,W) -> (N,K)."""
        self._check_input(x)
        weights = self.weights if weights is None else weights
        single = x.dim() == 3
        h = x.unsqueeze(0) if single else x
        for i, layer in enumerate(self.architecture):
            kind = layer["kind"]
            if kind == "conv":
                h = nnf.conv2d(h, weights[f"layer{i}.weight"], weights[f"layer{i}.bias"],
                               stride=layer.get("stride", 1), padding=layer.get("padding", 0))
            elif kind == "sigmoid":
                h = torch.sigmoid(h)
            elif kind == "relu":
                h = torch.relu(h)
            elif kind == "avgpool":
                h = nnf.avg_pool2d(h, layer["kernel"])
            elif kind == "flatten":
                h = h.flatten(1)
            elif kind == "dense":
                h = nnf.linear(h.flatten(1), weights[f"layer{i}.weight"], weights[f"layer{i}.bias"])
        return h[0] if single else h

    __call__ = forward


def _check_labels(model, labels):
    for y in labels:
        if not 0 <= int(y) < model.num_classes:
            raise LabelError(f"label {y} outside [0, {model.num_classes})")


def _as_batch(images, labels):
    if isinstance(images, torch.Tensor) and images.dim() == 3:
        images = images.unsqueeze(0)
    elif not isinstance(images, torch.Tensor):
        images = torch.stack(list(images))
    if isinstance(labels, int) or (isinstance(labels, torch.Tensor) and labels.dim() == 0):
        labels = [int(labels)]
    return images, torch.as_tensor([int(y) for y in labels], dtype=torch.long)


def loss_fn(model: TargetModel, images, labels, weights=None) -> torch.Tensor:
    """Mean cross-entropy of softmax scores; a batch loss is the mean of per-example losses."""
    images, labels = _as_batch(images, labels)
    _check_labels(model, labels.tolist())
    return nnf.cross_entropy(model.forward(images, weights), labels)


def loss(model: TargetModel, example: LabeledExample) -> torch.Tensor:
    return loss_fn(model, example.image, example.label)


def gradient_of(model: TargetModel, images, labels, create_graph: bool = False) -> GradientVector:
    """dF/dW flattened in canonical order.

    With ``create_graph`` the result stays differentiable with respect to the
    images, which is the second-order path both attacks rely on.
    """
    weights = {k: v.clone().requires_grad_(True) for k, v in model.weights.items()}
    value = loss_fn(model, images, labels, weights)
    names = sorted(weights)
    grads = torch.autograd.grad(value, [weights[n] for n in names], create_graph=create_graph)
    return flatten_gradients(dict(zip(names, grads)))


def compute_gradient(model: TargetModel, example: LabeledExample) -> GradientVector:
    return gradient_of(model, example.image, example.label)


# -- registry -----------------------------------------------------------------

def _lenet_architecture(num_classes):
    # 3 strided sigmoid convolutions + dense head, the classic DLG victim.
    return [
        {"kind": "conv", "out_channels": 12, "kernel": 5, "stride": 2, "padding": 2},
        {"kind": "sigmoid"},
        {"kind": "conv", "out_channels": 12, "kernel": 5, "stride": 2, "padding": 2},
        {"kind": "sigmoid"},
        {"kind": "conv", "out_channels": 12, "kernel": 5, "stride": 1, "padding": 2},
        {"kind": "sigmoid"},
        {"kind": "flatten"},
        {"kind": "dense", "out_features": num_classes},
    ]


def _linear_architecture(num_classes):
    return [{"kind": "flatten"}, {"kind": "dense", "out_features": num_classes}]


# name -> (layer list builder, weight scaling rule)
ARCHITECTURES = {
    "dlg-lenet": (_lenet_architecture, "unit"),
    "linear": (_linear_architecture, "fan_in"),
}


def init_weights(shapes, seed, dtype=torch.float64, scaling="unit"):
    """Seeded U[-0.5, 0.5] draws, optionally divided by the layer's fan-in.

    The sigmoid LeNet keeps the unscaled draw of the original DLG victim; with
    fan-in scaling its activations barely depend on the input and the leaked
    gradient carries almost no image information.
    """
    gen = torch.Generator().manual_seed(int(seed))
    weights = {}
    for name in sorted(shapes):
        shape = shapes[name]
        w_shape = shapes[f"{name.split('.')[0]}.weight"]
        u = torch.rand(shape, generator=gen, dtype=torch.float64) - 0.5
        if scaling == "fan_in":
            u = u / math.prod(w_shape[1:])
        weights[name] = u.to(dtype)
    return weights


def build_model(name: str, input_shape: Sequence[int] = (16, 16, 3), num_classes: int = 10,
                seed: int = 0, dtype=torch.float64, zero: bool = False) -> TargetModel:
    if name not in ARCHITECTURES:
        raise ConfigError(f"unknown target model {name!r}; known: {sorted(ARCHITECTURES)}")
    builder, scaling = ARCHITECTURES[name]
    arch = builder(num_classes)
    probe = TargetModel.__new__(TargetModel)
    probe.architecture, probe.input_shape, probe.num_classes = arch, tuple(input_shape), num_classes
    shapes = probe.parameter_shapes()
    if zero:
        weights = {k: torch.zeros(s, dtype=dtype) for k, s in shapes.items()}
    else:
        weights = init_weights(shapes, seed, dtype, scaling)
    return TargetModel(arch, weights, input_shape, num_classes, name=name)


# -- persistence ----------------------------------------------------------------

MAGIC = b"GLKM"


def write_checkpoint(path, header: dict, tensors: dict[str, torch.Tensor]):
    """Header JSON plus length-prefixed names and little-endian float64 arrays."""
    path = Path(path)
    blob = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().numpy().astype("<f8")
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_checkpoint(path, dtype=torch.float64):
    with Path(path).open("rb") as fh:
        if fh.read(4) != MAGIC:
            raise ConfigError(f"{path} is not a gradleak checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = math.prod(shape)
            arr = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            tensors[name] = torch.from_numpy(arr.copy()).to(dtype)
    return header, tensors


def save_model(model: TargetModel, path):
    header = {
        "kind": "target_model",
        "name": model.name,
        "architecture": model.architecture,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
    }
    write_checkpoint(path, header, model.weights)


def load_model(path, dtype=torch.float64) -> TargetModel:
    header, tensors = read_checkpoint(path, dtype)
    if header.get("kind") != "target_model":
        raise ConfigError(f"{path} does not hold a target model")
    return TargetModel(header["architecture"], tensors, header["input_shape"],
                       header["num_classes"], name=header["name"])
