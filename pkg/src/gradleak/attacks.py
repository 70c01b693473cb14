"""Gradient inversion attacks: DLG input optimization and gradient-guided diffusion fine-tuning."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import torch

from .diffusion import (
    DiffusionModel,
    LatentRecord,
    NoiseSchedule,
    SamplerSpec,
    generate,
    make_schedule,
    to_image_range,
)
from .errors import ConfigError, LayoutMismatch, NonFiniteGradient, SamplerSpecError, ZeroNormGradient
from .metrics import evaluate
from .numerics import GradientVector, cosine_distance_values
from .target_model import TargetModel, gradient_of

TRACE_COLUMNS = ("iteration", "attack_loss", "lr", "mse", "ssim", "psnr", "lpips_lite", "wall_ms")
DLG_DEFAULT_STEP = {"linear": 1.0, "dlg-lenet": 0.1}
THREAT_MODEL = (
    "attacker knows the target label; the leaked gradient is released once "
    "(defense noise, if any, is drawn a single time before the attack)"
)


@dataclass(frozen=True)
class AttackConfig:
    method: str = "ggdm"
    max_iterations: int = 200
    eta: float = 2e-4
    gamma: float = 0.98
    sampler: Optional[SamplerSpec] = None
    batch_size: int = 1
    snapshot_every: int = 10
    seed: int = 0
    dlg_step: Optional[float] = None

    def __post_init__(self):
        if self.method not in ("dlg", "ggdm"):
            raise ConfigError(f"unknown attack method {self.method!r}")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not (self.eta > 0 and self.gamma > 0):
            raise ConfigError("eta and gamma must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.method == "dlg" and self.sampler is not None:
            raise ConfigError("dlg takes no sampler")
        if self.method == "ggdm" and self.sampler is None:
            raise ConfigError("ggdm needs a sampler spec")

    def lr_at(self, iteration: int) -> float:
        """eta * gamma^(t-1): the closed form of lr <- gamma * lr started at eta."""
        return self.eta * self.gamma ** (iteration - 1)


@dataclass
class TraceRecord:
    iteration: int
    attack_loss: float
    lr: float
    mse: float = math.nan
    ssim: float = math.nan
    psnr: float = math.nan
    lpips_lite: float = math.nan
    wall_ms: float = 0.0

    def row(self):
        return [getattr(self, c) for c in TRACE_COLUMNS]


@dataclass
class AttackTrace:
    method: str
    records: list[TraceRecord] = field(default_factory=list)
    snapshots: dict[int, torch.Tensor] = field(default_factory=dict)
    final_image: Optional[torch.Tensor] = None
    initial_image: Optional[torch.Tensor] = None
    initial_loss: float = math.nan
    aborted: Optional[str] = None

    @property
    def peak(self) -> Optional[tuple[int, float]]:
        """(iteration, mse) of the minimum-MSE record; None without ground truth."""
        scored = [r for r in self.records if not math.isnan(r.mse)]
        if not scored:
            return None
        best = min(scored, key=lambda r: (r.mse, r.iteration))
        return best.iteration, best.mse

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def column(self, name):
        return [getattr(r, name) for r in self.records]


@dataclass
class FinetunedModelHandle:
    model: DiffusionModel
    target_id: str
    config: AttackConfig

    @property
    def theta_hat(self) -> dict[str, torch.Tensor]:
        return {k: v.detach() for k, v in self.model.net.named_parameters()}


def _snapshot_due(t, config):
    return t == 1 or t == config.max_iterations or (config.snapshot_every > 0 and t % config.snapshot_every == 0)


def _score(record, images, truths, slot):
    if truths is None or truths[slot] is None:
        return record
    rep = evaluate(images[slot], truths[slot])
    return replace(record, mse=rep.mse, ssim=rep.ssim, psnr=rep.psnr, lpips_lite=rep.lpips_lite)


def canonical_direction(g: torch.Tensor) -> torch.Tensor:
    """Unit direction of ``g`` rounded to a 24-bit mantissa (double precision only).

    The cosine objective only sees the direction, but fl(c * g) and g differ in
    their last bits; rounding the direction onto a coarser grid removes that
    residue so the whole fine-tuning run is exactly invariant to the sender's scale.
    """
    unit = g / torch.linalg.vector_norm(g)
    if unit.dtype == torch.float64:
        unit = unit.to(torch.float32).to(torch.float64)
    return unit


def _check_target(target_grad: GradientVector, model: TargetModel):
    names = tuple(sorted(model.weights))
    if tuple(n for n, _ in target_grad.layout) != names:
        raise LayoutMismatch("leaked gradient layout does not match the target model")
    if float(target_grad.norm()) == 0.0:
        raise ZeroNormGradient("leaked gradient has zero norm")


# -- DLG ------------------------------------------------------------------------------

def dlg_attack(target_grad: GradientVector, model: TargetModel, label: int, config: AttackConfig,
               ground_truth: Optional[torch.Tensor] = None, init: Optional[torch.Tensor] = None) -> AttackTrace:
    """Plain gradient descent on ||grad F(x', W) - leaked||^2 over the dummy image x'."""
    if config.method != "dlg":
        raise ConfigError("dlg_attack needs method='dlg'")
    _check_target(target_grad, model)
    target = target_grad.values.detach()
    step = config.dlg_step if config.dlg_step is not None else DLG_DEFAULT_STEP.get(model.name, 0.1)
    if init is None:
        gen = torch.Generator().manual_seed(int(config.seed))
        init = torch.randn(model.image_chw, generator=gen, dtype=torch.float64)
    x = init.detach().clone().to(model.dtype)
    truths = None if ground_truth is None else [ground_truth]

    def state(x):
        x = x.detach().requires_grad_(True)
        g = gradient_of(model, x, label, create_graph=True).values
        d = g - target
        value = torch.dot(d, d)
        (gx,) = torch.autograd.grad(value, x)
        if not torch.isfinite(gx).all() or not torch.isfinite(value):
            raise NonFiniteGradient("dummy image")
        return float(value.detach()), gx

    trace = AttackTrace("dlg", initial_image=x.clone())
    trace.initial_loss, gx = state(x)
    try:
        for t in range(1, config.max_iterations + 1):
            start = time.perf_counter()
            x = x - step * gx
            value, gx = state(x)
            record = TraceRecord(t, value, step)
            record.wall_ms = (time.perf_counter() - start) * 1e3
            trace.records.append(_score(record, [x], truths, 0))
            if _snapshot_due(t, config):
                trace.snapshots[t] = x.detach().clone()
    except NonFiniteGradient as exc:
        trace.aborted = str(exc)
        exc.trace = trace
        raise
    finally:
        trace.final_image = x.detach().clone()
    return trace


# -- gradient-guided diffusion fine-tuning ----------------------------------------------------

def _finetune_group(targets, model, labels, diffusion, latents, config, truths, schedule):
    """Fine-tune one diffusion copy so the mean gradient of its generated batch matches the mean leak.

    Returns the fine-tuned model and one trace per slot; every slot shares
    attack_loss and lr, metrics are per slot.
    """
    sampler = config.sampler
    sampler.validate(schedule)
    b = len(targets)
    for tg in targets:
        _check_target(tg, model)
    leak = targets[0].values.detach() if b == 1 else torch.stack([tg.values.detach() for tg in targets]).mean(0)
    leak = canonical_direction(leak)

    tuned = diffusion.clone()
    params = list(tuned.net.parameters())
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(params, lr=config.eta, betas=(0.9, 0.999), eps=1e-8)

    def state(backward):
        images = [to_image_range(generate(tuned, lat, sampler, schedule)) for lat in latents]
        batch = images[0] if b == 1 else torch.stack(images)
        g = gradient_of(model, batch, labels[0] if b == 1 else labels, create_graph=backward).values
        value = cosine_distance_values(g, leak)
        if not torch.isfinite(value):
            raise NonFiniteGradient("attack loss")
        optimizer.zero_grad(set_to_none=True)
        if backward:
            value.backward()
            for name, p in tuned.net.named_parameters():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NonFiniteGradient(name)
        return float(value.detach()), [im.detach() for im in images]

    traces = [AttackTrace("ggdm") for _ in range(b)]
    value, images = state(backward=True)
    for slot, tr in enumerate(traces):
        tr.initial_loss, tr.initial_image = value, images[slot]
    try:
        for t in range(1, config.max_iterations + 1):
            start = time.perf_counter()
            lr = config.lr_at(t)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            value, images = state(backward=t < config.max_iterations)
            wall = (time.perf_counter() - start) * 1e3
            for slot, tr in enumerate(traces):
                tr.records.append(_score(TraceRecord(t, value, lr, wall_ms=wall), images, truths, slot))
                if _snapshot_due(t, config):
                    tr.snapshots[t] = images[slot]
    except NonFiniteGradient as exc:
        for tr in traces:
            tr.aborted = str(exc)
        exc.trace = traces[0] if b == 1 else traces
        raise
    finally:
        for slot, tr in enumerate(traces):
            tr.final_image = images[slot]
    for p in params:
        p.requires_grad_(False)
    return tuned, traces


def ggdm_finetune(target_grad: GradientVector, model: TargetModel, label: int, diffusion: DiffusionModel,
                  latent: LatentRecord, config: AttackConfig, ground_truth: Optional[torch.Tensor] = None,
                  schedule: Optional[NoiseSchedule] = None, target_id: str = "target"):
    """Fine-tune a private copy of ``diffusion`` against one leaked gradient.

    Record t describes the model after t Adam updates, so the last record,
    the last snapshot and ``reconstruct(handle)`` all show the same image.
    """
    if config.method != "ggdm":
        raise ConfigError("ggdm_finetune needs method='ggdm'")
    schedule = schedule or make_schedule()
    truths = None if ground_truth is None else [ground_truth]
    tuned, (trace,) = _finetune_group([target_grad], model, [label], diffusion, [latent], config, truths, schedule)
    return FinetunedModelHandle(tuned, target_id, config), trace


def reconstruct(handle: FinetunedModelHandle, latent: LatentRecord, spec: SamplerSpec,
                schedule: Optional[NoiseSchedule] = None) -> torch.Tensor:
    if spec != handle.config.sampler:
        raise SamplerSpecError("reconstruction sampler differs from the one used for fine-tuning")
    schedule = schedule or make_schedule()
    with torch.no_grad():
        return to_image_range(generate(handle.model, latent, spec, schedule))


def batched_attack(targets: Sequence[GradientVector], model: TargetModel, labels: Sequence[int],
                   diffusion: DiffusionModel, latents: Sequence[LatentRecord], config: AttackConfig,
                   ground_truths=None, schedule: Optional[NoiseSchedule] = None):
    """Attack consecutive groups of ``config.batch_size`` leaks, one fine-tuned model per group.

    Slot j of every group starts from ``latents[j]``; returns one trace per target
    in input order plus the handles (one per group).
    """
    if not targets:
        raise ConfigError("no leaked gradients to attack")
    if config.method != "ggdm":
        raise ConfigError("batched_attack runs the ggdm method")
    b = config.batch_size
    if len(latents) < min(b, len(targets)):
        raise ConfigError(f"batch size {b} needs at least {b} latents")
    schedule = schedule or make_schedule()
    traces, handles = [], []
    for start in range(0, len(targets), b):
        group = list(targets[start:start + b])
        truths = None if ground_truths is None else list(ground_truths[start:start + b])
        tuned, group_traces = _finetune_group(group, model, list(labels[start:start + b]), diffusion,
                                              list(latents[:len(group)]), config, truths, schedule)
        handles.append(FinetunedModelHandle(tuned, f"batch-{start // b}", config))
        traces.extend(group_traces)
    return traces, handles


# -- persistence -------------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, int):
        return str(v)
    return format(float(v), ".10g")


def write_trace(trace: AttackTrace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            w.writerow([_fmt(v) for v in r.row()])


def read_trace(path) -> list[TraceRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ConfigError(f"{path}: unexpected trace columns {reader.fieldnames}")
        return [TraceRecord(int(row["iteration"]), *(float(row[c]) for c in TRACE_COLUMNS[1:]))
                for row in reader]
