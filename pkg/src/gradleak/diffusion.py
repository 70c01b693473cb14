"""Toy denoising diffusion model: schedule, samplers, training and latent round trips."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as nnf
from torch.func import functional_call

from .errors import ConfigError, NonFiniteGradient, SamplerSpecError, ScheduleError, ShapeError, SingularStep, StepRangeError
from .target_model import read_checkpoint, write_checkpoint


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; ``alpha_bar[t]`` is the cumulative product with ``alpha_bar[0] = 1``."""

    T: int
    beta: np.ndarray  # beta[t - 1] = beta_t
    alpha_bar: np.ndarray  # length T + 1

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise StepRangeError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def beta_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise StepRangeError(f"timestep {t} outside [1, {self.T}]")
        return float(self.beta[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"invalid schedule T={T}, beta in [{beta_start}, {beta_end}]")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        t = np.arange(T, dtype=np.float64)
        beta = beta_start + t / (T - 1) * (beta_end - beta_start)
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    running = 1.0
    for i, b in enumerate(beta, start=1):
        running *= 1.0 - b
        alpha_bar[i] = running
    return NoiseSchedule(T, beta, alpha_bar)


def to_model_range(x01: torch.Tensor) -> torch.Tensor:
    """[0, 1] images -> [-1, 1] diffusion space."""
    return x01 * 2.0 - 1.0


def to_image_range(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] diffusion space -> [0, 1] images (no clipping)."""
    return (x + 1.0) * 0.5


# -- epsilon network ----------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, channels, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb = nn.Linear(emb_dim, channels)
        self.norm2 = nn.GroupNorm(4, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(nnf.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(nnf.silu(self.norm2(h)))
        return x + h


class EpsilonUNet(nn.Module):
    """Two-stage U-shaped noise predictor with sinusoidal timestep features."""

    def __init__(self, in_channels=3, widths=(16, 32), emb_dim=32):
        super().__init__()
        c1, c2 = widths
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inp = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, emb_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, emb_dim)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, emb_dim)
        self.up2 = nn.Conv2d(2 * c2, c2, 3, padding=1)
        self.dec2 = ResBlock(c2, emb_dim)
        self.up1 = nn.Conv2d(c2 + c1, c1, 3, padding=1)
        self.dec1 = ResBlock(c1, emb_dim)
        self.out_norm = nn.GroupNorm(4, c1)
        self.out = nn.Conv2d(c1, in_channels, 3, padding=1)

    def forward(self, x, t):
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim).to(x.dtype))
        h1 = self.enc1(self.inp(x), emb)
        h2 = self.enc2(self.down1(h1), emb)
        m = self.mid(self.down2(h2), emb)
        u2 = nnf.interpolate(m, size=h2.shape[-2:], mode="nearest")
        u2 = self.dec2(self.up2(torch.cat([u2, h2], dim=1)), emb)
        u1 = nnf.interpolate(u2, size=h1.shape[-2:], mode="nearest")
        u1 = self.dec1(self.up1(torch.cat([u1, h1], dim=1)), emb)
        return self.out(nnf.silu(self.out_norm(u1)))


ARCHITECTURES = {"unet-16-32": dict(widths=(16, 32), emb_dim=32)}


class DiffusionModel:
    """epsilon_theta(x_t, t) on images of shape (C, H, W) in [-1, 1].

    Calling with ``params`` evaluates the network functionally under an
    alternative parameter map, which is how fine-tuning losses are grad-checked.
    """

    def __init__(self, image_shape, architecture="unet-16-32", seed=0, dtype=torch.float64):
        if architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown diffusion architecture {architecture!r}")
        self.image_shape = tuple(image_shape)  # (H, W, C)
        self.architecture = architecture
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = EpsilonUNet(in_channels=self.image_shape[2], **ARCHITECTURES[architecture]).to(dtype)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    @property
    def theta(self) -> dict[str, torch.Tensor]:
        return dict(self.net.named_parameters())

    def __call__(self, x_t, t, params=None):
        single = x_t.dim() == 3
        x = x_t.unsqueeze(0) if single else x_t
        tt = torch.full((x.shape[0],), float(t)) if not torch.is_tensor(t) else t.reshape(-1).expand(x.shape[0])
        if params is None:
            out = self.net(x, tt)
        else:
            out = functional_call(self.net, params, (x, tt))
        return out[0] if single else out

    def clone(self) -> DiffusionModel:
        return copy.deepcopy(self)

    def to(self, dtype) -> DiffusionModel:
        self.net.to(dtype)
        return self


def save_diffusion(model: DiffusionModel, path, extra=None):
    header = {"kind": "diffusion", "architecture": model.architecture,
              "image_shape": list(model.image_shape), **(extra or {})}
    write_checkpoint(path, header, {k: v for k, v in model.net.state_dict().items()})


def load_diffusion(path, dtype=torch.float64) -> DiffusionModel:
    header, tensors = read_checkpoint(path, dtype)
    if header.get("kind") != "diffusion":
        raise ConfigError(f"{path} does not hold a diffusion model")
    model = DiffusionModel(header["image_shape"], header["architecture"], dtype=dtype)
    model.net.load_state_dict(tensors)
    return model


# -- closed-form pieces -----------------------------------------------------------

def forward_diffuse(x0, t, schedule: NoiseSchedule, eps):
    """Sample x_t | x_0 with an injected standard-normal draw."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    if not 1 <= t <= schedule.T:
        raise StepRangeError(f"timestep {t} outside [1, {schedule.T}]")
    a = schedule.alpha(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps


def predict_x0(model, x_t, t, schedule: NoiseSchedule, params=None, eps_pred=None):
    a = schedule.alpha(t)
    if a <= 0.0:
        raise SingularStep(f"alpha_bar[{t}] = 0")
    if eps_pred is None:
        eps_pred = _eps(model, x_t, t, params)
    return (x_t - math.sqrt(1.0 - a) * eps_pred) / math.sqrt(a)


def _eps(model, x_t, t, params):
    return model(x_t, t) if params is None else model(x_t, t, params=params)


def ddim_step(model, x_t, t, t_prev, schedule: NoiseSchedule, params=None):
    """Deterministic (sigma = 0) reverse step from t to t_prev."""
    if not 0 <= t_prev < t <= schedule.T:
        raise StepRangeError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    eps = _eps(model, x_t, t, params)
    x0_hat = predict_x0(model, x_t, t, schedule, eps_pred=eps)
    a_prev = schedule.alpha(t_prev)
    return math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps


def ddpm_step(model, x_t, t, schedule: NoiseSchedule, z, t_prev=None, params=None):
    """Ancestral reverse step with sigma_t = sqrt(beta_t).

    For a strided step the per-step beta is replaced by 1 - alpha_t / alpha_{t_prev},
    which reduces to beta_t when ``t_prev = t - 1``.
    """
    if t < 1 or t > schedule.T:
        raise StepRangeError(f"timestep {t} outside [1, {schedule.T}]")
    t_prev = t - 1 if t_prev is None else t_prev
    a_t = schedule.alpha(t)
    if t_prev == t - 1:
        beta = schedule.beta_at(t)
    else:
        beta = 1.0 - a_t / schedule.alpha(t_prev)
    eps = _eps(model, x_t, t, params)
    mean = (x_t - beta / math.sqrt(1.0 - a_t) * eps) / math.sqrt(1.0 - beta)
    return mean + math.sqrt(beta) * z


# -- training ----------------------------------------------------------------------

def denoising_loss(model, x0, t, eps, schedule, params=None):
    """Mean over the batch of ||eps - eps_theta(x_t, t)||^2 for per-example t."""
    a = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t]
    x_t = a.sqrt()[:, None, None, None] * x0 + (1.0 - a).sqrt()[:, None, None, None] * eps
    tt = t.to(x0.dtype)
    pred = model(x_t, tt, params=params) if params is not None else model(x_t, tt)
    return ((eps - pred) ** 2).flatten(1).sum(1).mean()


def train_step(model: DiffusionModel, batch, schedule, rng: torch.Generator, optimizer) -> float:
    """One optimizer update on a [-1, 1] batch; returns the pre-update loss."""
    if batch.shape[0] == 0:
        raise ValueError("empty training batch")
    t = torch.randint(1, schedule.T + 1, (batch.shape[0],), generator=rng)
    eps = torch.randn(batch.shape, generator=rng, dtype=batch.dtype)
    optimizer.zero_grad()
    value = denoising_loss(model, batch, t, eps, schedule)
    value.backward()
    for name, p in model.net.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(name)
    optimizer.step()
    return float(value.detach())


def train_diffusion(model: DiffusionModel, images01, schedule, steps, batch_size=32, lr=2e-3,
                    seed=0, log_every=0, logger=None) -> list[float]:
    """Train epsilon_theta on [0, 1] images; returns the loss curve."""
    data = to_model_range(torch.stack(list(images01)).to(model.dtype))
    rng = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(steps, 1), eta_min=lr * 0.05)
    curve = []
    for step in range(steps):
        idx = torch.randint(0, data.shape[0], (min(batch_size, data.shape[0]),), generator=rng)
        batch = data[idx]
        # random horizontal flips keep the toy set from being memorised too quickly
        flip = torch.rand(batch.shape[0], generator=rng) < 0.5
        batch = torch.where(flip[:, None, None, None], batch.flip(-1), batch)
        curve.append(train_step(model, batch, schedule, rng, optimizer))
        sched.step()
        if logger is not None and log_every and step % log_every == 0:
            logger.info("diffusion step %d loss %.4f", step, curve[-1])
    return curve


# -- sub-sequenced round trips --------------------------------------------------------

@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "ddim"
    S_for: int = 40
    S_gen: int = 6
    t0: int = 500
    seed: int = 0

    def validate(self, schedule: NoiseSchedule | None = None):
        if self.kind not in ("ddim", "ddpm"):
            raise SamplerSpecError(f"unknown sampler kind {self.kind!r}")
        if self.S_for < 1 or self.S_gen < 1 or self.t0 < 1:
            raise SamplerSpecError("S_for, S_gen and t0 must be positive")
        if self.S_for > self.t0 or self.S_gen > self.t0:
            raise SamplerSpecError(f"S_for={self.S_for} and S_gen={self.S_gen} must not exceed t0={self.t0}")
        if schedule is not None and self.t0 > schedule.T:
            raise SamplerSpecError(f"t0={self.t0} exceeds T={schedule.T}")
        return self


def timestep_subsequence(t0: int, count: int) -> list[int]:
    """``count`` ascending, uniformly spaced integers over [1, t0] with both endpoints."""
    if count < 1 or count > t0:
        raise SamplerSpecError(f"cannot pick {count} timesteps from [1, {t0}]")
    if count == 1:
        return [t0]
    points = np.floor(np.linspace(1.0, float(t0), count) + 0.5).astype(int)
    return [int(p) for p in points]


@dataclass(frozen=True)
class LatentRecord:
    latent: torch.Tensor
    t0: int
    forward_steps_used: tuple[int, ...]
    source_id: str = ""
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.forward_steps_used[-1] != self.t0:
            raise SamplerSpecError("t0 must equal the last forward timestep")


def precompute_latent(model, x_ref, spec: SamplerSpec, schedule: NoiseSchedule, source_id="") -> LatentRecord:
    """Stochastic forward chain along the S_for sub-sequence of [1, t0].

    Each hop scales by sqrt(alpha_t / alpha_prev) and adds matching Gaussian
    noise, so the chain's marginal at t0 equals the closed-form forward draw.
    ``x_ref`` lives in [-1, 1]. ``model`` is accepted for interface symmetry.
    """
    spec.validate(schedule)
    steps = timestep_subsequence(spec.t0, spec.S_for)
    gen = torch.Generator().manual_seed(int(spec.seed))
    x = x_ref.detach()
    prev = 0
    for t in steps:
        ratio = schedule.alpha(t) / schedule.alpha(prev)
        noise = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(x.dtype)
        x = math.sqrt(ratio) * x + math.sqrt(1.0 - ratio) * noise
        prev = t
    return LatentRecord(x, spec.t0, tuple(steps), source_id, spec.seed)


def generate(model, latent: LatentRecord, spec: SamplerSpec, schedule: NoiseSchedule, params=None):
    """Reverse chain from x_{t0} to x_0 along the S_gen sub-sequence (output in [-1, 1]).

    The DDIM path is deterministic and differentiable with respect to theta.
    """
    spec.validate(schedule)
    if latent.t0 != spec.t0:
        raise SamplerSpecError(f"latent was computed for t0={latent.t0}, sampler asks for {spec.t0}")
    steps = timestep_subsequence(spec.t0, spec.S_gen)[::-1] + [0]
    x = latent.latent
    gen = torch.Generator().manual_seed(int(spec.seed)) if spec.kind == "ddpm" else None
    for t, t_prev in zip(steps[:-1], steps[1:]):
        if spec.kind == "ddim":
            x = ddim_step(model, x, t, t_prev, schedule, params=params)
        else:
            z = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(x.dtype)
            if t_prev == 0:
                z = torch.zeros_like(x)
            x = ddpm_step(model, x, t, schedule, z, t_prev=t_prev, params=params)
    return x
