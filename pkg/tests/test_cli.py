import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from covsampler import checks, formats, transforms
from covsampler.cli import main
from covsampler.evaluation import CSV_COLUMNS

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write_config(tmp_path, body):
    p = tmp_path / "run.toml"
    p.write_text("version = 1\n" + body)
    return p


class TestVerify:
    def test_all_pass(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert f"all {len(checks.CHECKS)} checks passed" in out

    def test_verbose_shows_tolerances(self, capsys):
        main(["verify", "--verbose"])
        out = capsys.readouterr().out
        assert "tolerance" in out.splitlines()[0]
        assert "1e-10" in out

    def test_broken_dct_is_reported(self, monkeypatch, capsys):
        real = transforms.dct_matrix
        monkeypatch.setattr(transforms, "dct_matrix", lambda n, k, norm="ortho": 1.01 * real(n, k, norm))
        assert main(["verify"]) == 1
        captured = capsys.readouterr()
        assert "FAILED:" in captured.err and "dct-orthonormality" in captured.err
        line = next(l for l in captured.out.splitlines() if l.startswith("dct-orthonormality"))
        assert "FAIL" in line


class TestSample:
    def test_minimal_config(self, tmp_path, capsys):
        assert main(["sample", "--config", str(CONFIGS / "minimal.toml"), "--out", str(tmp_path)]) == 0
        rows = formats.read_csv(tmp_path / "metrics.csv", CSV_COLUMNS)
        assert len(rows) == 1 and rows[0]["sampler"] == "ddim" and rows[0]["nfe"] == "8"
        samples = formats.read_samples(tmp_path / "samples" / "ddim_steps8_seed0.cvs")
        assert samples.shape == (500, 4, 4, 1)

    def test_guided_covaware_nfe(self, tmp_path):
        cfg = write_config(
            tmp_path,
            '[model]\nkind = "stationary"\nsize = 8\nchannels = 1\n'
            "[guidance]\nenabled = true\n"
            '[sampling]\nsamplers = ["covaware"]\nsteps = [12]\ncount = 40\n'
            '[estimator]\ntransform = "blockdct"\n',
        )
        assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        (row,) = formats.read_csv(tmp_path / "o" / "metrics.csv", CSV_COLUMNS)
        assert (row["steps"], row["nfe"]) == ("12", "36")
        diag = formats.read_csv(tmp_path / "o" / "diagnostics.csv", ("step", "groups"))
        assert len(diag) == 11

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, '[model]\nkind = "gaussian"\n[sampling]\nsamplers = ["ddpm", "covaware"]\nsteps = [3]\ncount = 30\n[estimator]\ntransform = "identity"\n')
        for d in ("a", "b"):
            assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
        for name in ("metrics.csv", "diagnostics.csv", "samples/covaware-identity-channel_steps3_seed0.cvs"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override(self, tmp_path):
        cfg = write_config(tmp_path, 'seeds = [0, 1]\n[model]\nkind = "gaussian"\n[sampling]\nsamplers = ["ddim"]\nsteps = [2]\ncount = 10\n')
        assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "7"]) == 0
        rows = formats.read_csv(tmp_path / "o" / "metrics.csv", CSV_COLUMNS)
        assert [r["seed"] for r in rows] == ["7"]

    def test_out_relative_to_config(self, tmp_path):
        cfg = write_config(tmp_path, 'out = "results"\n[model]\nkind = "gaussian"\n[sampling]\nsamplers = ["ddim"]\nsteps = [2]\ncount = 10\n')
        assert main(["sample", "--config", str(cfg)]) == 0
        assert (tmp_path / "results" / "metrics.csv").exists()

    @pytest.mark.parametrize(
        "body",
        ['[model]\nkind = "nope"\n', "[model\n", '[model]\nkind = "gaussian"\n[sampling]\nsamplers = ["covaware"]\nbudgets = [5]\n'],
    )
    def test_invalid_config_exit_2(self, tmp_path, body, capsys):
        cfg = write_config(tmp_path, body)
        assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "error:" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_missing_config(self, tmp_path):
        assert main(["sample", "--config", str(tmp_path / "none.toml")]) == 2

    def test_negative_seed(self):
        assert main(["sample", "--config", str(CONFIGS / "minimal.toml"), "--seed", "-1"]) == 2


class TestAblate:
    def test_grid(self, tmp_path):
        cfg = write_config(
            tmp_path,
            '[model]\nkind = "blockdiag"\nsize = 8\nchannels = 1\nblock = 4\n'
            '[sampling]\ncount = 20\n[estimator]\nblock_size = 4\nlevels = 2\n'
            '[ablation]\ntransforms = ["blockdct", "haar"]\naveraging = ["channel", "global", "isotropic"]\nbudgets = [6, 10]\n',
        )
        assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rows = formats.read_csv(tmp_path / "o" / "ablation.csv", CSV_COLUMNS)
        # isotropic runs once regardless of transform: (2 * 2 + 1) specs x 2 budgets
        assert len(rows) == 10
        assert (tmp_path / "o" / "ablation_diagnostics.csv").exists()

    def test_needs_section(self, tmp_path):
        cfg = write_config(tmp_path, '[model]\nkind = "gaussian"\n')
        assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def metrics_rows(n_samplers=2, budgets=(8, 16)):
    rows = []
    for i, s in enumerate(["covaware", "ddim", "heun"][:n_samplers]):
        for b in budgets:
            rows.append({"sampler": s, "transform": "convdct" if s == "covaware" else "none", "averaging": "channel" if s == "covaware" else "none",
                         "steps": b, "nfe": b, "mean_err": 0.1 / b, "cov_err": 1.0 / b + i, "spectrum_err": 0.5, "sw_dist": 0.2, "energy_dist": 0.01, "seed": 0})
    return rows


class TestReport:
    def test_two_series(self, tmp_path):
        formats.write_csv(tmp_path / "m.csv", metrics_rows(), CSV_COLUMNS)
        assert main(["report", str(tmp_path / "m.csv")]) == 0
        svg = (tmp_path / "m_cov_err.svg").read_text()
        assert svg.lstrip().startswith("<?xml") and "<svg" in svg
        assert len(list(tmp_path.glob("m_*.svg"))) == 5

    def test_single_row(self, tmp_path):
        formats.write_csv(tmp_path / "m.csv", metrics_rows(1, (8,)), CSV_COLUMNS)
        assert main(["report", str(tmp_path / "m.csv"), "--out", str(tmp_path / "plots")]) == 0
        assert (tmp_path / "plots" / "m_sw_dist.svg").exists()

    def test_deterministic_svg(self, tmp_path):
        formats.write_csv(tmp_path / "m.csv", metrics_rows(3), CSV_COLUMNS)
        main(["report", str(tmp_path / "m.csv"), "--out", str(tmp_path / "a")])
        main(["report", str(tmp_path / "m.csv"), "--out", str(tmp_path / "b")])
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_missing_column(self, tmp_path, capsys):
        cols = tuple(c for c in CSV_COLUMNS if c != "cov_err")
        formats.write_csv(tmp_path / "m.csv", metrics_rows(), cols)
        assert main(["report", str(tmp_path / "m.csv")]) == 2
        err = capsys.readouterr().err
        assert "schema error" in err and "cov_err" in err
        assert not list(tmp_path.glob("*.svg"))

    def test_bad_number(self, tmp_path):
        rows = metrics_rows()
        rows[0]["cov_err"] = "oops"
        formats.write_csv(tmp_path / "m.csv", rows, CSV_COLUMNS)
        assert main(["report", str(tmp_path / "m.csv")]) == 2

    def test_empty(self, tmp_path):
        formats.write_csv(tmp_path / "m.csv", [], CSV_COLUMNS)
        assert main(["report", str(tmp_path / "m.csv")]) == 2

    def test_seed_averaging(self):
        from covsampler.plotting import group_series

        rows = metrics_rows(1, (8,)) + [{**metrics_rows(1, (8,))[0], "seed": 1, "cov_err": 0.325}]
        series = group_series(rows, "cov_err")
        ((label, (nfe, vals)),) = series.items()
        assert label == "covaware/convdct/channel"
        assert list(nfe) == [8] and vals[0] == pytest.approx(0.5 * (1 / 8 + 0.325))


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "covsampler.cli", "verify"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr


def test_samples_round_trip_through_cli(tmp_path):
    main(["sample", "--config", str(CONFIGS / "minimal.toml"), "--out", str(tmp_path)])
    x = formats.read_samples(tmp_path / "samples" / "ddim_steps8_seed0.cvs")
    assert np.all(np.isfinite(x))
