"""End-to-end experiment orchestration: runs, round trips, sweeps, timing and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import attacks
from .attacks import AttackConfig, TRACE_COLUMNS, THREAT_MODEL
from .config import RunConfig, SweepSpec, derive_seed
from .data import load_image_folder, make_synthetic_dataset, save_image
from .diffusion import (
    DiffusionModel,
    SamplerSpec,
    generate,
    load_diffusion,
    make_schedule,
    precompute_latent,
    save_diffusion,
    to_image_range,
    to_model_range,
    train_diffusion,
)
from .errors import GradLeakError
from .metrics import evaluate, mse
from .numerics import NoiseSpec, add_noise
from .target_model import build_model, gradient_of, load_model

log = logging.getLogger(__name__)

RUN_FILES = ("config.toml", "summary.json", "timing.json")
REPORT_FILES = ("report.txt", "curves.png")


class RunFailed(GradLeakError):
    def __init__(self, stage, message, run_dir):
        self.stage, self.run_dir = stage, Path(run_dir)
        super().__init__(f"stage {stage!r} failed: {message}")


@dataclass
class TimingReport:
    """Wall-clock phases of one run, in seconds."""

    latent_precompute_s: float = math.nan
    per_iteration_s: float = math.nan
    total_finetune_s: float = math.nan
    forward_s: float = math.nan
    generate_s: float = math.nan
    iteration_s: list = field(default_factory=list)
    partial: bool = False

    def check(self):
        """Internal consistency problems (empty when the report is sound)."""
        problems = []
        for name in ("latent_precompute_s", "per_iteration_s", "total_finetune_s", "forward_s", "generate_s"):
            v = getattr(self, name)
            if not (isinstance(v, float) and math.isfinite(v) and v >= 0):
                problems.append(f"{name} missing or negative")
        if self.iteration_s and not problems:
            if self.total_finetune_s < len(self.iteration_s) * min(self.iteration_s):
                problems.append("total_finetune_s below iterations x fastest iteration")
            if self.total_finetune_s < self.per_iteration_s:
                problems.append("total_finetune_s below per_iteration_s")
        return problems

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, allow_nan=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def _dtype(config):
    return torch.float64 if config["run.precision"] == "double" else torch.float32


def _seed(config, index, stream, key):
    explicit = config[key]
    return explicit if explicit >= 0 else derive_seed(config["run.master_seed"], index, stream)


def sampler_spec(config, slot=0) -> SamplerSpec:
    return SamplerSpec(config["sampler.kind"], config["sampler.S_for"], config["sampler.S_gen"],
                       config["sampler.t0"], _seed(config, slot, "sampler", "sampler.seed"))


def attack_config(config, index=0) -> AttackConfig:
    method = config["attack.method"]
    return AttackConfig(
        method=method,
        max_iterations=config["attack.max_iterations"],
        eta=config["attack.eta"],
        gamma=config["attack.gamma"],
        sampler=sampler_spec(config) if method == "ggdm" else None,
        batch_size=config["attack.batch_size"],
        snapshot_every=config["attack.snapshot_every"],
        seed=_seed(config, index, "attack", "attack.seed"),
        dlg_step=config["attack.dlg_step"] or None,
    )


def load_datasets(config, dtype):
    size = config.image_size
    public = make_synthetic_dataset(config["dataset.public_size"], size, config["dataset.public_seed"], dtype)
    if config["dataset.kind"] == "image-folder":
        private = load_image_folder(config["dataset.path"], size, dtype)
    else:
        private = make_synthetic_dataset(config["dataset.private_size"], size, config["dataset.private_seed"], dtype)
    return public, private


def prepare_target(config, dtype):
    if config["target.checkpoint"]:
        return load_model(config["target.checkpoint"], dtype)
    return build_model(config["target.model"], config.image_size, config["target.num_classes"],
                       config["target.seed"], dtype)


def prepare_diffusion(config, public, fallback_path=None):
    """Load the checkpoint if it exists, otherwise train on the public set and save it."""
    path = config["diffusion.checkpoint"] or fallback_path
    dtype = _dtype(config)
    if path and Path(path).exists():
        return load_diffusion(path, dtype), {"source": "loaded", "checkpoint": str(path)}
    train_dtype = torch.float32 if config["diffusion.train_precision"] == "single" else torch.float64
    model = DiffusionModel(config.image_size, config["diffusion.architecture"], config["diffusion.seed"], train_dtype)
    schedule = schedule_of(config)
    curve = train_diffusion(model, [e.image.to(train_dtype) for e in public], schedule,
                            steps=config["diffusion.train_steps"], batch_size=config["diffusion.batch_size"],
                            lr=config["diffusion.lr"], seed=config["diffusion.seed"], log_every=500, logger=log)
    model.to(torch.float64)
    info = {"source": "trained", "train_steps": len(curve),
            "train_loss_first": curve[0] if curve else None,
            "train_loss_last100": statistics.fmean(curve[-100:]) if curve else None}
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_diffusion(model, path, {"train_steps": len(curve)})
        info["checkpoint"] = str(path)
    return model.to(dtype), info


def schedule_of(config):
    return make_schedule(config["diffusion.T"], config["diffusion.beta_start"], config["diffusion.beta_end"])


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_trace_dir(trace, directory, keep_wall_time):
    directory.mkdir(parents=True, exist_ok=True)
    if not keep_wall_time:
        # wall time lives in timing.json; the table stays byte-reproducible
        trace = attacks.AttackTrace(trace.method, [replace(r, wall_ms=0.0) for r in trace.records])
    attacks.write_trace(trace, directory / "trace.csv")


def _write_snapshots(trace, directory):
    snap_dir = directory / "snapshots"
    snap_dir.mkdir(parents=True, exist_ok=True)
    for it, image in sorted(trace.snapshots.items()):
        save_image(image, snap_dir / f"recon_{it:06d}.png")


def _record_dict(r):
    return {c: getattr(r, c) for c in TRACE_COLUMNS if c != "wall_ms"}


def run(config: RunConfig) -> Path:
    """Execute one experiment and persist every artifact under ``run.output_dir``."""
    config.validate()
    out = Path(config["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.toml")
    dtype = _dtype(config)
    summary = {"status": "running", "threat_model": THREAT_MODEL, "method": config["attack.method"],
               "second_order": "autograd (nested reverse mode)"}
    timing = TimingReport()
    stage = "data"
    try:
        public, private = load_datasets(config, dtype)
        targets = [private[i] for i in config["dataset.targets"]]

        stage = "target"
        model = prepare_target(config, dtype)

        stage = "leak"
        t = time.perf_counter()
        leaks = []
        for k, ex in enumerate(targets):
            g = gradient_of(model, ex.image, ex.label)
            if config["defense.family"] != "none" and config["defense.variance"] > 0:
                spec = NoiseSpec(config["defense.family"], config["defense.variance"],
                                 _seed(config, k, "defense", "defense.seed"))
                g = add_noise(g, spec)
            leaks.append(g)
        timing.forward_s = (time.perf_counter() - t) / len(targets)
        if config["defense.family"] != "none":
            summary["defense"] = {"family": config["defense.family"], "variance": config["defense.variance"]}

        schedule = schedule_of(config)
        if config["attack.method"] == "ggdm":
            stage = "diffusion"
            diffusion, summary["diffusion"] = prepare_diffusion(config, public)

            stage = "latent"
            b = min(config["attack.batch_size"], len(targets))
            latents, refs = [], []
            t = time.perf_counter()
            for slot in range(b):
                ref = public[(config["dataset.reference"] + slot) % len(public)]
                latents.append(precompute_latent(diffusion, to_model_range(ref.image), sampler_spec(config, slot),
                                                 schedule, source_id=ref.example_id))
                refs.append(ref)
            timing.latent_precompute_s = (time.perf_counter() - t) / b
            t = time.perf_counter()
            with torch.no_grad():
                rt = [to_image_range(generate(diffusion, lat, sampler_spec(config, s), schedule))
                      for s, lat in enumerate(latents)]
            timing.generate_s = (time.perf_counter() - t) / b
            summary["roundtrip_mse"] = [mse(img.clamp(0, 1), ref.image) for img, ref in zip(rt, refs)]
            summary["references"] = [ref.example_id for ref in refs]

            stage = "attack"
            cfg = attack_config(config)
            traces, handles = attacks.batched_attack(
                leaks, model, [ex.label for ex in targets], diffusion, latents, cfg,
                ground_truths=[ex.image for ex in targets], schedule=schedule)

            stage = "reconstruct"
            recons = []
            for k, tr in enumerate(traces):
                handle = handles[k // cfg.batch_size]
                recon = attacks.reconstruct(handle, latents[k % cfg.batch_size], cfg.sampler, schedule)
                recons.append(recon)
        else:
            stage = "attack"
            timing.latent_precompute_s = 0.0
            timing.generate_s = 0.0
            traces = [attacks.dlg_attack(g, model, ex.label, attack_config(config, k), ground_truth=ex.image)
                      for k, (g, ex) in enumerate(zip(leaks, targets))]
            recons = [tr.final_image for tr in traces]

        stage = "evaluate"
        per_target = []
        iteration_s = [r.wall_ms / 1e3 for tr in traces for r in tr.records]
        timing.iteration_s = iteration_s
        timing.per_iteration_s = statistics.fmean(iteration_s)
        timing.total_finetune_s = math.fsum(iteration_s)
        for k, (tr, ex, recon) in enumerate(zip(traces, targets, recons)):
            directory = out if len(targets) == 1 else out / f"target_{k:03d}"
            _write_trace_dir(tr, directory, config["run.trace_wall_time"])
            _write_snapshots(tr, directory)
            report = evaluate(recon, ex.image, ex.example_id, tr.final.iteration)
            peak_it, peak_mse = tr.peak
            per_target.append({
                "image_id": ex.example_id,
                "label": ex.label,
                "initial_attack_loss": tr.initial_loss,
                "final": _record_dict(tr.final),
                "peak": {"iteration": peak_it, "mse": peak_mse},
                "reconstruction": report.as_dict(),
                "reconstruction_matches_trace": bool(torch.equal(recon, tr.final_image)),
            })
        summary["targets"] = per_target
        summary["aggregate"] = {
            m: statistics.fmean(t["final"][m] for t in per_target) for m in ("mse", "ssim", "psnr", "lpips_lite")
        }
        if len(per_target) == 1:
            summary["final"] = per_target[0]["final"]
            summary["peak"] = per_target[0]["peak"]
        summary["status"] = "ok"
    except Exception as exc:
        summary["status"] = "failed"
        summary["error"] = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
        timing.partial = True
        _write_json(out / "summary.json", summary)
        timing.save(out / "timing.json")
        raise RunFailed(stage, str(exc), out) from exc
    _write_json(out / "summary.json", summary)
    timing.save(out / "timing.json")
    return out


def roundtrip(config: RunConfig) -> Path:
    """Diffusion round trip only: forward chain to t0 and DDIM back, scored against the reference."""
    config.validate()
    out = Path(config["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.toml")
    dtype = _dtype(config)
    public, _ = load_datasets(config, dtype)
    diffusion, info = prepare_diffusion(config, public)
    schedule = schedule_of(config)
    ref = public[config["dataset.reference"] % len(public)]
    spec = sampler_spec(config)
    timing = TimingReport(per_iteration_s=0.0, total_finetune_s=0.0, forward_s=0.0)
    t = time.perf_counter()
    latent = precompute_latent(diffusion, to_model_range(ref.image), spec, schedule, ref.example_id)
    timing.latent_precompute_s = time.perf_counter() - t
    t = time.perf_counter()
    with torch.no_grad():
        image = to_image_range(generate(diffusion, latent, spec, schedule))
    timing.generate_s = time.perf_counter() - t
    report = evaluate(image, ref.image, ref.example_id)
    save_image(image, out / "roundtrip.png")
    _write_json(out / "summary.json", {"status": "ok", "mode": "roundtrip", "diffusion": info,
                                       "roundtrip": report.as_dict()})
    timing.save(out / "timing.json")
    return out


def check_run_dir(run_dir) -> list[str]:
    """Problems with a run directory: missing artifacts or unexpected entries (empty when complete)."""
    root = Path(run_dir)
    problems = [name for name in RUN_FILES if not (root / name).is_file()]
    targets = sorted(root.glob("target_*"))
    trace_dirs = targets or [root]
    allowed = set(RUN_FILES) | set(REPORT_FILES) | {d.name for d in targets}
    for d in trace_dirs:
        if not (d / "trace.csv").is_file():
            problems.append(str((d / "trace.csv").relative_to(root)))
        if not list((d / "snapshots").glob("recon_*.png")):
            problems.append(str((d / "snapshots").relative_to(root)))
        allowed_here = {"trace.csv", "snapshots", *REPORT_FILES} | (allowed if d == root else set())
        problems.extend(f"unexpected {p.relative_to(root)}" for p in sorted(d.iterdir()) if p.name not in allowed_here)
    return problems


def timing(run_dir) -> TimingReport:
    path = Path(run_dir) / "timing.json"
    if not path.exists():
        return TimingReport(partial=True)
    report = TimingReport.load(path)
    if report.check():
        report.partial = True
    return report


def _sweep_one(args):
    spec_mode, config = args
    out = Path(config["run.output_dir"])
    try:
        if spec_mode == "roundtrip":
            roundtrip(config)
        else:
            run(config)
        return json.loads((out / "summary.json").read_text())
    except RunFailed as exc:
        return {"status": "failed", "error": {"stage": exc.stage, "message": str(exc)}}
    except GradLeakError as exc:
        return {"status": "failed", "error": {"stage": "setup", "message": str(exc)}}


SWEEP_COLUMNS = ("axis", "value", "status", "final_mse", "final_ssim", "final_psnr", "final_lpips_lite",
                 "peak_iteration", "peak_mse", "roundtrip_mse", "run_dir")


def _sweep_row(spec, value, config, summary):
    row = dict.fromkeys(SWEEP_COLUMNS, "")
    row.update(axis=spec.axis, value=json.dumps(value), status=summary.get("status", "failed"),
               run_dir=config["run.output_dir"])
    if "roundtrip" in summary:
        row["roundtrip_mse"] = summary["roundtrip"]["mse"]
        row["final_mse"] = summary["roundtrip"]["mse"]
        row["final_ssim"] = summary["roundtrip"]["ssim"]
        row["final_psnr"] = summary["roundtrip"]["psnr"]
        row["final_lpips_lite"] = summary["roundtrip"]["lpips_lite"]
    if "aggregate" in summary:
        agg = summary["aggregate"]
        row.update(final_mse=agg["mse"], final_ssim=agg["ssim"], final_psnr=agg["psnr"],
                   final_lpips_lite=agg["lpips_lite"])
        peaks = [t["peak"] for t in summary["targets"]]
        row["peak_iteration"] = peaks[0]["iteration"] if len(peaks) == 1 else ""
        row["peak_mse"] = statistics.fmean(p["mse"] for p in peaks)
        if "roundtrip_mse" in summary:
            row["roundtrip_mse"] = statistics.fmean(summary["roundtrip_mse"])
    if "error" in summary:
        row["status"] = f"failed:{summary['error']['stage']}"
    return row


def sweep(spec: SweepSpec, workers: int | None = None) -> list[dict]:
    """One run per axis value; rows come back in axis order whatever the completion order."""
    configs = [spec.config_for(v, i) for i, v in enumerate(spec.values)]
    jobs = [(spec.mode, c) for c in configs]
    workers = spec.workers if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_sweep_one, jobs))
    else:
        summaries = [_sweep_one(j) for j in jobs]
    rows = [_sweep_row(spec, v, c, s) for v, c, s in zip(spec.values, configs, summaries)]
    root = Path(spec.base["run.output_dir"])
    root.mkdir(parents=True, exist_ok=True)
    with open(root / f"sweep_{spec.axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def report(run_dir) -> list[Path]:
    """Re-render the summary as text and the loss/MSE curves as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = Path(run_dir)
    summary = json.loads((root / "summary.json").read_text())
    written = []
    lines = [f"status: {summary.get('status')}", f"method: {summary.get('method')}",
             f"threat model: {summary.get('threat_model')}"]
    if "error" in summary:
        lines.append(f"error in stage {summary['error']['stage']}: {summary['error']['message']}")
    for t in summary.get("targets", []):
        f, p = t["final"], t["peak"]
        lines.append(f"{t['image_id']}: final mse={f['mse']:.6g} ssim={f['ssim']:.4f} psnr={f['psnr']:.3f} "
                     f"lpips_lite={f['lpips_lite']:.4g}; peak mse={p['mse']:.6g} at iteration {p['iteration']}")
    text_path = root / "report.txt"
    text_path.write_text("\n".join(lines) + "\n")
    written.append(text_path)

    trace_paths = [root / "trace.csv"] if (root / "trace.csv").exists() else sorted(root.glob("target_*/trace.csv"))
    for path in trace_paths:
        records = attacks.read_trace(path)
        it = [r.iteration for r in records]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        ax1.plot(it, [r.attack_loss for r in records])
        ax1.set_yscale("log")
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("attack loss")
        ax2.plot(it, [r.mse for r in records])
        ax2.set_xlabel("iteration")
        ax2.set_ylabel("MSE to target")
        fig.tight_layout()
        png = path.parent / "curves.png"
        fig.savefig(png, dpi=100)
        plt.close(fig)
        written.append(png)
    return written
