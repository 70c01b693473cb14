"""Desk-scale gradient leakage laboratory: DLG and gradient-guided diffusion fine-tuning."""

from .attacks import AttackConfig, AttackTrace, batched_attack, dlg_attack, ggdm_finetune, reconstruct
from .config import RunConfig, SweepSpec, load_config, load_sweep
from .data import load_image_folder, make_synthetic_dataset
from .diffusion import DiffusionModel, SamplerSpec, generate, make_schedule, precompute_latent
from .errors import GradLeakError
from .metrics import evaluate, lpips_lite, mse, psnr, ssim
from .numerics import GradientVector, NoiseSpec, add_noise, cosine_distance, grad_check
from .runner import TimingReport, check_run_dir, run, sweep, timing
from .target_model import LabeledExample, TargetModel, build_model, compute_gradient

__version__ = "0.1.0"
