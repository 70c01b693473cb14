import json
import math

import numpy as np
import pytest
import torch

from gradleak import runner
from gradleak.attacks import TRACE_COLUMNS, read_trace
from gradleak.cli import main
from gradleak.config import SCHEMA, RunConfig, SweepSpec, derive_seed, load_config, load_sweep, parse_text, schema_markdown
from gradleak.data import load_image_folder, make_synthetic_dataset, save_image, save_image_folder
from gradleak.errors import ConfigError, IngestError


# -- datasets --------------------------------------------------------------------------------

def test_synthetic_dataset_is_deterministic():
    a, b = make_synthetic_dataset(10, seed=4), make_synthetic_dataset(10, seed=4)
    assert all(torch.equal(x.image, y.image) and x.label == y.label for x, y in zip(a, b))
    assert not torch.equal(a[0].image, make_synthetic_dataset(10, seed=5)[0].image)


def test_synthetic_dataset_contents():
    data = make_synthetic_dataset(64, (16, 16, 3), seed=100)
    assert len(data) == 64 and {e.label for e in data} == {0, 1}
    assert all(e.image.shape == (3, 16, 16) and e.image.min() >= 0 and e.image.max() <= 1 for e in data)
    means = [torch.stack([e.image for e in data if e.label == c]).mean(dim=(0, 2, 3)) for c in (0, 1)]
    assert float((means[0] - means[1]).abs().max()) > 0.05


@pytest.mark.parametrize("n, size", [(0, (16, 16, 3)), (4, (2, 16, 3)), (4, (16, 16, 1))])
def test_synthetic_dataset_rejects_degenerate_sizes(n, size):
    with pytest.raises(ConfigError):
        make_synthetic_dataset(n, size)


def test_image_folder_single_file(tmp_path):
    (tmp_path / "0").mkdir()
    save_image(torch.rand(3, 16, 16), tmp_path / "0" / "a.png")
    data = load_image_folder(tmp_path, (16, 16, 3))
    assert len(data) == 1 and data[0].label == 0 and data[0].image.shape == (3, 16, 16)


def test_image_folder_wrong_size_names_the_file(tmp_path):
    (tmp_path / "1").mkdir()
    save_image(torch.rand(3, 8, 8), tmp_path / "1" / "small.png")
    with pytest.raises(IngestError, match="small.png"):
        load_image_folder(tmp_path, (16, 16, 3))


def test_image_folder_empty_or_missing(tmp_path):
    with pytest.raises(IngestError):
        load_image_folder(tmp_path, (16, 16, 3))
    with pytest.raises(IngestError):
        load_image_folder(tmp_path / "nope", (16, 16, 3))


def test_image_folder_round_trip_quantization(tmp_path):
    data = make_synthetic_dataset(12, seed=2)
    save_image_folder(data, tmp_path)
    back = load_image_folder(tmp_path, (16, 16, 3))
    assert len(back) == 12
    by_id = {e.example_id: e for e in back}
    for i, e in enumerate(data):
        err = float((by_id[f"{e.label}/{i:05d}.png"].image - e.image).abs().max())
        assert err <= 1 / 255


# -- configuration -----------------------------------------------------------------------------

def test_defaults_validate_and_round_trip(tmp_path):
    cfg = RunConfig().validate()
    cfg.save(tmp_path / "c.toml")
    assert load_config(tmp_path / "c.toml").values == cfg.values
    assert cfg["attack.eta"] == 2e-4 and cfg["attack.gamma"] == 0.98 and cfg["sampler.t0"] == 500
    assert cfg.image_size == (16, 16, 3)


def test_dotted_and_table_forms_agree():
    a = parse_text('attack.eta = 1e-3\nsampler.t0 = 300\n')
    b = parse_text('[attack]\neta = 1e-3\n[sampler]\nt0 = 300\n')
    assert a == b == {"attack.eta": 1e-3, "sampler.t0": 300}


@pytest.mark.parametrize("text", ["attack.etta = 1.0", "attack.eta = \"big\"", "sampler.t0 = 2000",
                                  "attack.method = \"lbfgs\"", "run.trace_wall_time = 1", "= broken"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_schema_doc_lists_every_key():
    doc = schema_markdown()
    assert all(f"`{key}`" in doc for key, *_ in SCHEMA)


def test_derive_seed():
    assert derive_seed(0, 1, "attack") == derive_seed(0, 1, "attack")
    seeds = {derive_seed(m, i, s) for m in range(3) for i in range(3) for s in ("attack", "sampler", "defense")}
    assert len(seeds) == 27


def test_sweep_spec_validation(tmp_path):
    base = RunConfig().with_updates({"run.output_dir": str(tmp_path)})
    with pytest.raises(ConfigError):
        SweepSpec("lr", [1], base)
    with pytest.raises(ConfigError):
        SweepSpec("eta", [], base)
    with pytest.raises(ConfigError):
        SweepSpec("t0", [5000], base)
    spec = SweepSpec("s_for_s_gen", [[20, 4], [40, 6]], base)
    cfg = spec.config_for([20, 4], 0)
    assert cfg["sampler.S_for"] == 20 and cfg["sampler.S_gen"] == 4
    assert cfg["run.output_dir"].endswith("s_for_s_gen_000")
    assert SweepSpec("epochs_K", [25], base).config_for(25, 0)["attack.max_iterations"] == 25


def test_load_sweep(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text('sweep.axis = "gamma"\nsweep.values = [0.9, 0.98]\nattack.max_iterations = 7\n')
    spec = load_sweep(path)
    assert spec.axis == "gamma" and spec.values == [0.9, 0.98] and spec.base["attack.max_iterations"] == 7


# -- runs ----------------------------------------------------------------------------------------

def short_config(toy, out, **updates):
    return RunConfig().with_updates({
        "diffusion.checkpoint": toy.checkpoint,
        "attack.max_iterations": 12,
        "attack.snapshot_every": 5,
        "run.output_dir": str(out),
        **updates,
    })


@pytest.mark.slow
def test_run_is_byte_reproducible_and_complete(toy, tmp_path):
    a = runner.run(short_config(toy, tmp_path / "a"))
    b = runner.run(short_config(toy, tmp_path / "b"))
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    assert runner.check_run_dir(a) == []
    assert sorted(p.name for p in (a / "snapshots").iterdir()) == [
        "recon_000001.png", "recon_000005.png", "recon_000010.png", "recon_000012.png"]
    summary = json.loads((a / "summary.json").read_text())
    last = read_trace(a / "trace.csv")[-1]
    for col in TRACE_COLUMNS[:-1]:
        assert float("%.10g" % summary["final"][col]) == getattr(last, col)
    assert summary["targets"][0]["reconstruction_matches_trace"]
    assert summary["status"] == "ok" and "label" in summary["threat_model"]


@pytest.mark.slow
def test_timing_report(toy, tmp_path):
    out = runner.run(short_config(toy, tmp_path / "t"))
    report = runner.timing(out)
    assert not report.partial and report.check() == []
    assert report.per_iteration_s > 0
    assert report.total_finetune_s >= 12 * min(report.iteration_s)
    assert report == runner.TimingReport.load(out / "timing.json")
    (out / "timing.json").unlink()
    assert runner.timing(out).partial


@pytest.mark.slow
def test_multiple_targets_get_subdirectories(toy, tmp_path):
    out = runner.run(short_config(toy, tmp_path / "m", **{"dataset.targets": [0, 1], "attack.max_iterations": 3}))
    assert (out / "target_000" / "trace.csv").exists() and (out / "target_001" / "trace.csv").exists()
    assert runner.check_run_dir(out) == []
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["targets"]) == 2
    assert summary["aggregate"]["mse"] == pytest.approx(np.mean([t["final"]["mse"] for t in summary["targets"]]))


def test_dlg_run_with_linear_target(tmp_path):
    cfg = RunConfig().with_updates({"attack.method": "dlg", "target.model": "linear", "image.size": [8, 8, 3],
                                    "attack.max_iterations": 20, "run.output_dir": str(tmp_path / "d")})
    out = runner.run(cfg)
    assert runner.check_run_dir(out) == []
    assert runner.timing(out).check() == []


def test_failed_run_records_stage(tmp_path):
    cfg = RunConfig().with_updates({"dataset.kind": "image-folder", "dataset.path": str(tmp_path / "missing"),
                                    "run.output_dir": str(tmp_path / "f")})
    with pytest.raises(runner.RunFailed) as info:
        runner.run(cfg)
    assert info.value.stage == "data"
    summary = json.loads((tmp_path / "f" / "summary.json").read_text())
    assert summary["status"] == "failed" and summary["error"]["stage"] == "data"
    assert (tmp_path / "f" / "config.toml").exists()
    assert runner.timing(tmp_path / "f").partial
    assert "trace.csv" in runner.check_run_dir(tmp_path / "f")


def test_defense_noise_is_recorded(tmp_path):
    cfg = RunConfig().with_updates({"attack.method": "dlg", "target.model": "linear", "image.size": [8, 8, 3],
                                    "attack.max_iterations": 5, "defense.family": "laplacian",
                                    "defense.variance": 1e-3, "run.output_dir": str(tmp_path / "n")})
    summary = json.loads((runner.run(cfg) / "summary.json").read_text())
    assert summary["defense"] == {"family": "laplacian", "variance": 1e-3}


# -- sweeps ------------------------------------------------------------------------------------------

def dlg_base(tmp_path, **updates):
    return RunConfig().with_updates({"attack.method": "dlg", "target.model": "linear", "image.size": [8, 8, 3],
                                     "attack.max_iterations": 10, "run.output_dir": str(tmp_path), **updates})


def test_singleton_sweep_equals_run(tmp_path):
    spec = SweepSpec("gamma", [0.9], dlg_base(tmp_path / "s"))
    rows = runner.sweep(spec)
    assert len(rows) == 1
    direct = runner.run(dlg_base(tmp_path / "direct", **{"attack.gamma": 0.9}))
    assert (direct / "trace.csv").read_bytes() == (tmp_path / "s" / "gamma_000" / "trace.csv").read_bytes()
    summary = json.loads((direct / "summary.json").read_text())
    assert rows[0]["final_mse"] == summary["aggregate"]["mse"]
    assert (tmp_path / "s" / "sweep_gamma.csv").read_text().count("\n") == 2


def test_sweep_records_failures_and_continues(tmp_path, monkeypatch):
    real_run = runner.run

    def flaky(config):
        if config["attack.max_iterations"] == 7:
            raise runner.RunFailed("attack", "injected", config["run.output_dir"])
        return real_run(config)

    monkeypatch.setattr(runner, "run", flaky)
    rows = runner.sweep(SweepSpec("epochs_K", [5, 7, 9], dlg_base(tmp_path)))
    assert [r["status"] for r in rows] == ["ok", "failed:attack", "ok"]
    assert [json.loads(r["value"]) for r in rows] == [5, 7, 9]


@pytest.mark.slow
def test_parallel_sweep_keeps_axis_order(toy, tmp_path):
    base = short_config(toy, tmp_path / "p1")
    rows1 = runner.sweep(SweepSpec("t0", [300, 100, 200], base, mode="roundtrip", workers=1))
    base2 = short_config(toy, tmp_path / "p2")
    rows2 = runner.sweep(SweepSpec("t0", [300, 100, 200], base2, mode="roundtrip", workers=3))
    assert [r["value"] for r in rows2] == ["300", "100", "200"]
    assert [r["final_mse"] for r in rows1] == [r["final_mse"] for r in rows2]


@pytest.mark.slow
def test_epochs_sweep_trend(toy, tmp_path):
    ok = 0
    for k in range(5):
        base = short_config(toy, tmp_path / f"k{k}", **{"dataset.targets": [k], "sampler.seed": 0})
        rows = runner.sweep(SweepSpec("epochs_K", [25, 50, 100, 200], base))
        mses = [r["final_mse"] for r in rows]
        ok += all(b <= a for a, b in zip(mses, mses[1:]))
    assert ok >= 4


# -- command line ------------------------------------------------------------------------------------

def test_cli_metrics(tmp_path, capsys):
    save_image(torch.zeros(3, 16, 16), tmp_path / "a.png")
    save_image(torch.full((3, 16, 16), 0.1), tmp_path / "b.png")
    assert main(["metrics", str(tmp_path / "a.png"), str(tmp_path / "b.png")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mse"] == pytest.approx((26 / 255) ** 2)


def test_cli_attack_report_and_failure(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('attack.method = "dlg"\ntarget.model = "linear"\nimage.size = [8, 8, 3]\nattack.max_iterations = 5\n')
    out = tmp_path / "run"
    assert main(["attack", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    assert load_config(out / "config.toml")["run.master_seed"] == 3
    assert main(["report", str(out)]) == 0
    assert (out / "curves.png").exists() and (out / "report.txt").exists()
    assert runner.check_run_dir(out) == []
    assert main(["defend", str(cfg), "--out", str(tmp_path / "dv"), "--variance", "0.01"]) == 0
    capsys.readouterr()

    bad = tmp_path / "bad.toml"
    bad.write_text('dataset.kind = "image-folder"\ndataset.path = "/does/not/exist"\n')
    assert main(["attack", str(bad), "--out", str(tmp_path / "bad")]) != 0
    assert "stage data" in capsys.readouterr().err
    bad.write_text("attack.nope = 1\n")
    assert main(["attack", str(bad)]) != 0
    assert "unknown configuration key" in capsys.readouterr().err
