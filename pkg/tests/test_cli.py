import csv
import hashlib
import json

import numpy as np
import pytest

from pelab.cli import main
from pelab.codecs import read_samples


def write_cfg(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == 0
    assert "standard" in capsys.readouterr().out


class TestConfigErrors:
    def test_unknown_key(self, tmp_path):
        assert main(["enhance", "--config", write_cfg(tmp_path, {"enhanse": {}}), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_nested_key(self, tmp_path):
        assert main(["enhance", "--config", write_cfg(tmp_path, {"enhance": {"sigma": 1}}), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_scenario(self, tmp_path):
        assert main(["enhance", "--config", write_cfg(tmp_path, {"scenario": "lsun"}), "--out", str(tmp_path / "o")]) == 2

    def test_bad_codec(self, tmp_path):
        cfg = {"codec": {"kind": "uniform-mse", "delta": -1.0}}
        assert main(["enhance", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2

    def test_unparsable_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("n: [1, 2\n")
        assert main(["enhance", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["enhance", "--config", str(tmp_path / "none.yaml")]) == 2

    def test_bad_perturb_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["sweep-speed", "--perturb", "0.3"])
        assert exc.value.code == 2


class TestEnhance:
    def test_zero_sigma_matches_base(self, tmp_path):
        cfg = {"n": 20_000, "enhance": {"sigma_t": 0.0}, "metrics": {"dump_samples": True}}
        out = tmp_path / "o"
        assert main(["enhance", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        base = json.loads((out / "base_report.json").read_text())
        assert set(rep) == {"mse", "psnr_db", "kl_grid", "frechet", "fisher", "nfe", "rate_bits"}
        assert rep["mse"] == base["mse"] and rep["kl_grid"] == base["kl_grid"]
        with open(out / "samples.bin", "rb") as fh:
            assert read_samples(fh).shape == (20_000, 1)

    def test_fast_beats_base(self, tmp_path):
        cfg = {"n": 50_000, "enhance": {"preset": "fast", "n_probe": 10_000}}
        out = tmp_path / "o"
        assert main(["enhance", "--config", write_cfg(tmp_path, cfg, "c.yaml"), "--out", str(out), "--seed", "3"]) == 0
        rep = json.loads((out / "report.json").read_text())
        base = json.loads((out / "base_report.json").read_text())
        assert rep["nfe"] == 1 and rep["kl_grid"] < base["kl_grid"]

    def test_manifest_hashes(self, tmp_path):
        out = tmp_path / "o"
        main(["enhance", "--config", write_cfg(tmp_path, {"n": 2000, "enhance": {"sigma_t": 0.2, "steps": 4}}), "--out", str(out)])
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"]["enhance"]["sigma_t"] == 0.2
        for name, digest in man["files"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
        assert man["nfe_totals"]["enhance"] == 4 * 2000

    def test_fisher_toggle(self, tmp_path):
        cfg = {"n": 2000, "enhance": {"sigma_t": 0.5, "steps": 4}, "metrics": {"fisher": True}}
        out = tmp_path / "o"
        main(["enhance", "--config", write_cfg(tmp_path, cfg), "--out", str(out)])
        assert json.loads((out / "report.json").read_text())["fisher"] > 0


class TestSweeps:
    def test_pd_single_sigma(self, tmp_path):
        cfg = {"n": 5000, "sweep_pd": {"sigma_list": [0.3]}, "enhance": {"steps": 16}}
        out = tmp_path / "o"
        assert main(["sweep-pd", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
        r = rows(out / "pd_curve.csv")
        assert r[0] == ["sigma_t", "mse", "psnr_db", "kl_grid", "frechet"] and len(r) == 2

    def test_pd_with_interpolation(self, tmp_path):
        cfg = {"n": 5000, "sweep_pd": {"sigma_list": [0.1, 0.3], "yan_alpha": [0.25, 0.75]}, "enhance": {"steps": 16}}
        out = tmp_path / "o"
        assert main(["sweep-pd", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
        r = rows(out / "pd_curve.csv")
        assert r[0][-1] == "alpha" and len(r) == 5
        assert r[1][-1] == "" and r[3][-1] == "0.25"

    def test_pd_byte_identical_rerun(self, tmp_path):
        cfg = write_cfg(tmp_path, {"n": 3000, "sweep_pd": {"sigma_list": [0.1, 0.2]}, "enhance": {"steps": 8}})
        main(["sweep-pd", "--config", cfg, "--out", str(tmp_path / "a"), "--workers", "1"])
        main(["sweep-pd", "--config", cfg, "--out", str(tmp_path / "b"), "--workers", "2"])
        assert (tmp_path / "a" / "pd_curve.csv").read_bytes() == (tmp_path / "b" / "pd_curve.csv").read_bytes()

    def test_speed_single_budget(self, tmp_path):
        cfg = {"n": 5000, "sweep_speed": {"budgets": [1]}}
        out = tmp_path / "o"
        assert main(["sweep-speed", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
        r = rows(out / "speed_curve.csv")
        assert r[0] == ["solver", "nfe", "kl_grid", "frechet"]
        assert [x[0] for x in r[1:]] == ["consistency", "ode-euler", "ode-heun", "sde-euler"]
        assert all(x[1] == "1" for x in r[1:])

    def test_speed_perturbed_flag(self, tmp_path):
        cfg = {"n": 3000, "sweep_speed": {"budgets": [8], "solvers": ["sde-euler"]}}
        out = tmp_path / "o"
        assert main(["sweep-speed", "--config", write_cfg(tmp_path, cfg), "--out", str(out), "--perturb", "0.3,2"]) == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"]["score"] == {"kind": "perturbed", "amplitude": 0.3, "frequency": 2.0}


class TestVerify:
    def test_zero_sigma_passes(self, tmp_path):
        cfg = {"n": 5000, "verify": {"sigma_list": [0.0]}}
        out = tmp_path / "o"
        assert main(["verify", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
        assert json.loads((out / "theorem_report.json").read_text())["passed"] is True

    def test_sign_flipped_score_fails(self, tmp_path):
        cfg = {"n": 20_000, "score": {"kind": "flipped"}, "verify": {"steps": 64}}
        assert main(["verify", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 3

    def test_no_wall_time_in_report(self, tmp_path):
        cfg = {"n": 5000, "verify": {"sigma_list": [0.5], "steps": 8}}
        out = tmp_path / "o"
        main(["verify", "--config", write_cfg(tmp_path, cfg), "--out", str(out)])
        assert "time" not in (out / "theorem_report.json").read_text()


class TestBd:
    def make(self, tmp_path, name, shift):
        p = tmp_path / name
        p.write_text("rate_bits,metric\n" + "".join(f"{r!r},{float(30 + 3 * np.log(r) + shift)!r}\n" for r in [0.5, 1.0, 2.0, 4.0]))
        return str(p)

    def test_identical(self, tmp_path):
        a = self.make(tmp_path, "a.csv", 0.0)
        out = tmp_path / "o"
        assert main(["bd", a, a, "--out", str(out)]) == 0
        assert json.loads((out / "bd_report.json").read_text())["bd_delta"] == 0.0

    def test_shift(self, tmp_path):
        a, b = self.make(tmp_path, "a.csv", 0.0), self.make(tmp_path, "b.csv", -5.0)
        out = tmp_path / "o"
        main(["bd", a, b, "--out", str(out)])
        assert json.loads((out / "bd_report.json").read_text())["bd_delta"] == pytest.approx(-5.0, abs=1e-9)

    def test_missing_inputs(self, tmp_path):
        assert main(["bd", "--out", str(tmp_path / "o")]) == 2

    def test_bad_curve_is_numeric_failure(self, tmp_path):
        p = tmp_path / "short.csv"
        p.write_text("rate_bits,metric\n1,2\n2,3\n")
        assert main(["bd", str(p), str(p), "--out", str(tmp_path / "o")]) == 3
