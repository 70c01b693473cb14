import hashlib
import json
import time
from dataclasses import dataclass

import pytest
import torch

from gradleak.data import make_synthetic_dataset
from gradleak.diffusion import DiffusionModel, load_diffusion, make_schedule, save_diffusion, train_diffusion
from gradleak.target_model import build_model

torch.set_num_threads(1)

# Desk-scale defaults shared by the slow tests and the acceptance suite.
TRAIN = {"steps": 3000, "batch_size": 32, "lr": 2e-3, "seed": 0, "public_size": 64, "public_seed": 100}

ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@dataclass
class ToyStack:
    schedule: object
    diffusion: DiffusionModel
    checkpoint: str
    public: list
    private: list
    target: object
    train_seconds: float


def _train(path):
    public = make_synthetic_dataset(TRAIN["public_size"], (16, 16, 3), TRAIN["public_seed"], torch.float32)
    model = DiffusionModel((16, 16, 3), seed=TRAIN["seed"], dtype=torch.float32)
    train_diffusion(model, [e.image for e in public], make_schedule(), TRAIN["steps"],
                    batch_size=TRAIN["batch_size"], lr=TRAIN["lr"], seed=TRAIN["seed"])
    save_diffusion(model.to(torch.float64), path, {"train": TRAIN})


@pytest.fixture(scope="session")
def toy(request):
    """Trained toy diffusion model (cached across sessions) plus the default datasets and target."""
    key = hashlib.sha256(json.dumps(TRAIN, sort_keys=True).encode()).hexdigest()[:12]
    path = request.config.cache.mkdir("gradleak") / f"diffusion-{key}.bin"
    start = time.perf_counter()
    if not path.exists():
        _train(path)
    return ToyStack(
        schedule=make_schedule(),
        diffusion=load_diffusion(path),
        checkpoint=str(path),
        public=make_synthetic_dataset(TRAIN["public_size"], (16, 16, 3), TRAIN["public_seed"]),
        private=make_synthetic_dataset(8, (16, 16, 3), 7),
        target=build_model("dlg-lenet", (16, 16, 3), 10, seed=1),
        train_seconds=time.perf_counter() - start,
    )
