import json

import numpy as np
import pytest

from tcec import __version__
from tcec.calibration import ScalingMatrix
from tcec.cli import main
from tcec.config import default_config, parse_config
from tcec.harness import cmd_bounds, cmd_calibrate, cmd_run, cmd_schedule, cmd_verify

SMALL = "sampler.steps = 10\nrun.seeds = 0..3\ncalibration.samples = 16\n"


@pytest.fixture
def small_cfg():
    return parse_config(SMALL)


def write_cfg(tmp_path, text=SMALL):
    p = tmp_path / "exp.cfg"
    p.write_text(text, encoding="utf-8")
    return str(p)


def test_schedule_report(tmp_path):
    rep = cmd_schedule(default_config(), tmp_path)
    assert len(rep["steps"]) == 50
    assert not any(rep["rho_lt_one_L0"])
    first = (tmp_path / "m_condition.csv").read_bytes()
    cmd_schedule(default_config(), tmp_path)
    assert (tmp_path / "m_condition.csv").read_bytes() == first
    head = (tmp_path / "schedule.csv").read_text().splitlines()
    assert head[0] == f"# tcec {__version__}" and head[1].startswith("# config ")
    assert any(h.startswith("# columns ") for h in head[:6])


def test_schedule_with_mlp_probe(tmp_path):
    cfg = parse_config("denoiser.kind = seeded_mlp\nlatent.channels = 1\nlatent.height = 2\n"
                       "latent.width = 2\nsampler.steps = 5\n")
    rep = cmd_schedule(cfg, tmp_path)
    assert all(r["L_probe"] > 0 for r in rep["steps"])


def test_calibrate_zero_model(tmp_path):
    cfg = parse_config(SMALL + "error.kind = zero\n")
    rep = cmd_calibrate(cfg, tmp_path)
    K = ScalingMatrix.read(tmp_path / "K.txt")
    assert np.max(np.abs(K.values)) <= 1e-6
    assert rep["lambda_provenance"] == "empirical"


def test_calibrate_recovers_and_grid(tmp_path, small_cfg):
    rep = cmd_calibrate(small_cfg, tmp_path, lam="0")
    assert rep["kstar_max_abs_error"] <= 1e-6 and rep["lambda_provenance"] == "fixed"
    rep = cmd_calibrate(small_cfg, tmp_path / "g", lam="grid")
    assert rep["lambda_provenance"] == "grid" and len(rep["lambda_grid"]) == 7


def test_run_fp_only(tmp_path, small_cfg):
    rep = cmd_run(small_cfg, tmp_path, variants=["fp"])
    assert all(v == 0.0 for v in rep["variants"]["fp"]["final_mse"])
    rows = (tmp_path / "ddim_fp_seed0.csv").read_text().splitlines()
    assert rows[-1].split(",")[3] == "inf"


def test_run_quant_tcec(tmp_path, small_cfg):
    cmd_calibrate(small_cfg, tmp_path, lam="0")
    rep = cmd_run(small_cfg, tmp_path, k_file=str(tmp_path / "K.txt"), svg="curves.svg", threads=2)
    comp = rep["comparisons"]["tcec_vs_quant"]
    assert comp["improved_every_seed"]
    assert rep["bounds"]["bound_holds"]
    assert (tmp_path / "curves.svg").read_text().startswith("<svg")
    data = (tmp_path / "ddim_tcec_seed2.csv").read_bytes()
    assert b"\r" not in data
    assert b"# columns step_index,t,mse,psnr,delta_norm,eps_norm,correction_norm" in data.splitlines()[:7]


def test_run_needs_K(tmp_path, small_cfg):
    from tcec.errors import ConfigError
    with pytest.raises(ConfigError):
        cmd_run(small_cfg, tmp_path)


def test_bounds(tmp_path):
    rep = cmd_bounds(parse_config("error.kind = zero\n"), tmp_path)
    assert rep["sigma"] == 0.0 and rep["bound_delta0"] == 0.0 and rep["measured_delta0"] == 0.0
    rep = cmd_bounds(parse_config("error.kind = gaussian\n"), tmp_path)
    assert rep["bound_holds"] and not rep["any_premise_rho_lt_one"] and rep["premise_warning"]
    assert json.loads((tmp_path / "bounds.json").read_text())["bound_holds"]


def test_verify_default(tmp_path):
    rep = cmd_verify(default_config(), tmp_path)
    assert rep["passed"], [c for c in rep["checks"] if not c["passed"]]
    assert rep["weight_report"]["matching_mode"] == "recursion"


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = str(tmp_path / "o")
    assert main(["--config", cfg, "--out", out, "schedule"]) == 0
    assert main(["calibrate", "--config", cfg, "--out", out, "--lambda", "0"]) == 0
    assert main(["run", "--config", cfg, "--out", out, "--k-file", f"{out}/K.txt",
                 "--variant", "quant,tcec", "--seeds", "0..1", "--svg"]) == 0
    assert (tmp_path / "o" / "delta_norm.svg").exists()
    assert main(["bounds", "--config", cfg, "--out", out]) == 0
    assert main(["verify", "--config", cfg, "--out", out, "--k-file", f"{out}/K.txt"]) == 0
    bad = write_cfg(tmp_path, "nonsense.key = 3\n")
    assert main(["schedule", "--config", bad, "--out", out]) == 2
    assert main(["run", "--config", cfg, "--out", out, "--variant", "tcec"]) == 2


def test_cli_verify_detects_corrupted_K(tmp_path):
    cfg = write_cfg(tmp_path)
    out = str(tmp_path / "o")
    assert main(["calibrate", "--config", cfg, "--out", out]) == 0
    K = ScalingMatrix.read(f"{out}/K.txt")
    K.values = -K.values
    K.write(f"{out}/K_bad.txt")
    assert main(["verify", "--config", cfg, "--out", out, "--k-file", f"{out}/K_bad.txt"]) == 1
    rep = json.loads((tmp_path / "o" / "verify.json").read_text())
    assert "weight_report" in rep and not rep["passed"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_nan_abort(tmp_path):
    cfg = write_cfg(tmp_path, "denoiser.kind = seeded_mlp\ndenoiser.output_scale = 1e308\n"
                              "latent.channels = 1\nlatent.height = 2\nlatent.width = 2\n"
                              "sampler.steps = 5\nrun.seeds = 0\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--variant", "fp"]) == 3
