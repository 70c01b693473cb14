"""Gradient containers, distance kernels, defense noise and finite-difference checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import LayoutMismatch, NonFiniteGradient, UnsupportedNoise, ZeroNormGradient

Layout = tuple[tuple[str, tuple[int, ...]], ...]

NOISE_FAMILIES = ("gaussian", "laplacian")


@dataclass(frozen=True)
class GradientVector:
    """A flattened gradient together with the layout used to flatten it.

    ``values`` is a 1-D tensor and may carry an autograd graph, which is how the
    attacks differentiate through a first-order gradient.
    """

    values: torch.Tensor
    layout: Layout

    def __post_init__(self):
        expected = sum(math.prod(shape) for _, shape in self.layout)
        if self.values.dim() != 1 or self.values.numel() != expected:
            raise LayoutMismatch(
                f"values have {self.values.numel()} entries, layout describes {expected}"
            )

    def __len__(self):
        return self.values.numel()

    def detach(self) -> GradientVector:
        return GradientVector(self.values.detach(), self.layout)

    def scaled(self, c: float) -> GradientVector:
        return GradientVector(self.values * c, self.layout)

    def norm(self) -> torch.Tensor:
        return torch.linalg.vector_norm(self.values)


def flatten_gradients(per_parameter_grads: Mapping[str, torch.Tensor]) -> GradientVector:
    """Concatenate per-parameter gradients in canonical (lexicographic) order."""
    names = sorted(per_parameter_grads)
    chunks, layout = [], []
    for name in names:
        g = torch.as_tensor(per_parameter_grads[name])
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(name)
        chunks.append(g.reshape(-1))
        layout.append((name, tuple(g.shape)))
    if chunks:
        values = torch.cat(chunks)
    else:
        values = torch.zeros(0, dtype=torch.get_default_dtype())
    return GradientVector(values, tuple(layout))


def unflatten_gradients(g: GradientVector) -> dict[str, torch.Tensor]:
    out, offset = {}, 0
    for name, shape in g.layout:
        n = math.prod(shape)
        out[name] = g.values[offset:offset + n].reshape(shape)
        offset += n
    return out


def _check_layouts(g: GradientVector, h: GradientVector):
    if g.layout != h.layout:
        raise LayoutMismatch("gradient layouts differ")


def cosine_distance_values(g: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """1 - <g, h> / (|g| |h|) on raw tensors; differentiable in both arguments."""
    g_norm = torch.linalg.vector_norm(g)
    h_norm = torch.linalg.vector_norm(h)
    if g_norm.item() == 0.0 or h_norm.item() == 0.0:
        raise ZeroNormGradient("cosine distance is undefined for a zero-norm gradient")
    return 1.0 - torch.dot(g, h) / (g_norm * h_norm)


def cosine_distance(g: GradientVector, h: GradientVector) -> torch.Tensor:
    _check_layouts(g, h)
    return cosine_distance_values(g.values, h.values)


def squared_l2_distance(g: GradientVector, h: GradientVector) -> torch.Tensor:
    _check_layouts(g, h)
    d = g.values - h.values
    return torch.dot(d, d)


@dataclass(frozen=True)
class NoiseSpec:
    """Per-element i.i.d. zero-mean defense noise applied once to a released gradient."""

    family: str = "gaussian"
    variance: float = 0.0
    seed: int = 0
    mean: float = 0.0

    def __post_init__(self):
        if self.variance < 0 or not math.isfinite(self.variance):
            raise ValueError(f"noise variance must be finite and >= 0, got {self.variance}")
        if self.mean != 0.0:
            raise ValueError("defense noise is zero-mean")
        if self.seed < 0:
            raise ValueError("noise seed must be nonnegative")

    @property
    def laplace_scale(self) -> float:
        # Var(Laplace(0, b)) = 2 b^2
        return math.sqrt(self.variance / 2.0)


def sample_noise(spec: NoiseSpec, n: int) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    if spec.family == "gaussian":
        return rng.normal(0.0, math.sqrt(spec.variance), size=n)
    if spec.family == "laplacian":
        return rng.laplace(0.0, spec.laplace_scale, size=n)
    raise UnsupportedNoise(f"unknown noise family {spec.family!r}; expected one of {NOISE_FAMILIES}")


def add_noise(g: GradientVector, spec: NoiseSpec) -> GradientVector:
    if spec.family not in NOISE_FAMILIES:
        raise UnsupportedNoise(f"unknown noise family {spec.family!r}; expected one of {NOISE_FAMILIES}")
    if spec.variance == 0.0:
        return g
    noise = torch.from_numpy(sample_noise(spec, len(g))).to(g.values.dtype)
    return GradientVector(g.values + noise, g.layout)


def grad_check(
    f: Callable[..., torch.Tensor],
    params: torch.Tensor | Mapping[str, torch.Tensor],
    probe_indices: Sequence[int],
    step: float = 1e-5,
    atol: float = 1e-12,
) -> float:
    """Max relative error between autograd and central differences over probed coordinates.

    ``params`` is either a tensor or a name->tensor map; in the latter case ``f``
    receives a map and probe indices address the canonical flattening.
    ``atol`` floors the denominator so that coordinates with a vanishing
    derivative do not produce spurious relative errors.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Mapping):
        base = flatten_gradients({k: v.detach() for k, v in params.items()})
        layout = base.layout
        p0 = base.values.clone()

        def call(p):
            return f(unflatten_gradients(GradientVector(p, layout)))
    else:
        shape = params.shape
        p0 = params.detach().reshape(-1).clone()

        def call(p):
            return f(p.reshape(shape))

    p = p0.clone().requires_grad_(True)
    value = call(p)
    (analytic,) = torch.autograd.grad(value, p)
    if not torch.isfinite(analytic).all():
        raise NonFiniteGradient("analytic")

    # grad mode stays on: f may itself differentiate (e.g. a loss built on a first-order gradient)
    worst = 0.0
    for i in probe_indices:
        e = torch.zeros_like(p0)
        e[i] = step
        f_plus = float(call(p0 + e).detach())
        f_minus = float(call(p0 - e).detach())
        numeric = (f_plus - f_minus) / (2.0 * step)
        if not math.isfinite(numeric):
            raise NonFiniteGradient(f"coordinate {i}")
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
        worst = max(worst, err)
    return worst
