"""Reconstruction-quality metrics on (C, H, W) images in [0, 1]."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import torch
import torch.nn.functional as nnf

from .errors import ShapeError, WindowError

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
LPIPS_LITE_SEED = 20240607
LPIPS_LITE_WIDTHS = (8, 16, 32)


def _pair(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a.detach(), b.detach()


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(((a - b) ** 2).mean())


def psnr_from_mse(err: float, max_value: float = 1.0) -> float:
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


def psnr(a, b, max_value: float = 1.0) -> float:
    return psnr_from_mse(mse(a, b), max_value)


@lru_cache(maxsize=None)
def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM of the channel-mean grayscale images (valid 7x7 Gaussian windows)."""
    a, b = _pair(a, b)
    if a.dim() == 3:
        a, b = a.mean(0), b.mean(0)
    if min(a.shape) < SSIM_WINDOW:
        raise WindowError(f"image {tuple(a.shape)} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = gaussian_window()[None, None]

    def blur(x):
        return nnf.conv2d(x[None, None], win)[0, 0]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


@lru_cache(maxsize=None)
def _pyramid(in_channels: int):
    gen = torch.Generator().manual_seed(LPIPS_LITE_SEED)
    layers, c = [], in_channels
    for width in LPIPS_LITE_WIDTHS:
        w = torch.randn((width, c, 3, 3), generator=gen, dtype=torch.float64) / math.sqrt(9 * c)
        layers.append(w)
        c = width
    return tuple(layers)


def _features(x):
    feats, h = [], x[None] * 2.0 - 1.0
    for i, w in enumerate(_pyramid(x.shape[0])):
        h = torch.tanh(nnf.conv2d(h, w, stride=1 if i == 0 else 2, padding=1))
        norm = torch.sqrt((h ** 2).sum(1, keepdim=True)) + 1e-10
        feats.append(h / norm)
    return feats


def lpips_lite(a, b) -> float:
    """Sum over three scales of the mean squared difference of unit-normalized random features.

    A fixed, untrained stand-in for LPIPS: useful for orderings and trends only.
    """
    a, b = _pair(a, b)
    if a.dim() != 3:
        raise ShapeError("lpips_lite expects (C, H, W) images")
    return float(sum(((fa - fb) ** 2).mean() for fa, fb in zip(_features(a), _features(b))))


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    ssim: float
    psnr: float
    lpips_lite: float
    image_id: str = ""
    iteration: int = 0

    def as_dict(self):
        return asdict(self)


def evaluate(recon, target, image_id: str = "", iteration: int = 0) -> MetricsReport:
    """All four metrics after clipping the reconstruction into [0, 1]."""
    recon, target = _pair(recon, target)
    recon = recon.clamp(0.0, 1.0)
    err = mse(recon, target)
    return MetricsReport(
        mse=err,
        ssim=ssim(recon, target),
        psnr=psnr_from_mse(err),
        lpips_lite=lpips_lite(recon, target),
        image_id=image_id,
        iteration=iteration,
    )
