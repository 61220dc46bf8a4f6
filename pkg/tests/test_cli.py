import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from qknit.cli import REPORT_COLUMNS, main, manifest_path
from qknit.correlator import CountsTable
from qknit.model import ProtocolConfig
from qknit.states import DensityMatrix, fidelity, maximally_mixed
from qknit.table import table_state
from qknit.tags import HEADER, MAGIC

IDEAL_DENSE = {"protocol": "ideal", "bank": {"efficiency": 1.0, "deadtime": 0.0}, "duration": 5e-4, "seed": 1}
IDEAL_HALF = {"protocol": "ideal", "bank": {"efficiency": 0.5, "deadtime": 0.0}, "duration": 1e-3, "seed": 2}


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def write_config(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys is not None else ""
    return code, out


def summary_of(out):
    return dict(line.split("=", 1) for line in out.splitlines() if "=" in line and " " not in line)


@pytest.fixture(scope="module")
def ideal_pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("ideal")
    cfg = write_config(d / "ideal.json", IDEAL_DENSE)
    assert main(["simulate", "--config", cfg, "--out", str(d / "tags.bin")]) == 0
    assert main(["correlate", str(d / "tags.bin"), "--out", str(d / "counts.json"), "--embedded", "--max-k", "4"]) == 0
    assert main(["tomo", str(d / "counts.json"), "--spec", "fig3c", "--boot", "20", "--out", str(d / "tomo.json")]) == 0
    return d


@pytest.fixture(scope="module")
def half_counts(tmp_path_factory):
    d = tmp_path_factory.mktemp("half")
    cfg = write_config(d / "half.json", IDEAL_HALF)
    assert main(["simulate", "--config", cfg, "--out", str(d / "tags.bin")]) == 0
    assert main(["correlate", str(d / "tags.bin"), "--out", str(d / "counts.json"), "--embedded", "--max-k", "3"]) == 0
    return d


class TestModel:
    def test_fig3c_is_row_8(self, tmp_path, capsys):
        out = tmp_path / "m.json"
        code, text = run(["model", "--ideal", "--spec", "fig3c", "--out", out], capsys)
        assert code == 0
        assert "fidelity_ideal=1.0000" in text and "negativity=0.5000" in text
        dm = DensityMatrix.from_json(json.loads(out.read_text())["dm"])
        assert fidelity(dm, table_state(8)) == pytest.approx(1.0, abs=1e-9)

    def test_fig2a_is_maximally_mixed(self, tmp_path, capsys):
        out = tmp_path / "m.json"
        code, _ = run(["model", "--ideal", "--spec", "fig2a", "--out", out], capsys)
        assert code == 0
        dm = DensityMatrix.from_json(json.loads(out.read_text())["dm"])
        assert np.allclose(dm.matrix, np.eye(4) / 4, atol=1e-12)

    def test_calibrated_dop(self, capsys):
        code, text = run(["model", "--calibrated", "--spec", "fig3a"], capsys)
        assert code == 0
        dop = float(text.split("dop_single=")[1].split()[0])
        assert dop == pytest.approx(0.79, abs=0.02)

    def test_all_specs_to_directory(self, tmp_path, capsys):
        code, text = run(["model", "--out", tmp_path / "all"], capsys)
        assert code == 0
        files = sorted(p.name for p in (tmp_path / "all").glob("*.json") if "manifest" not in p.name)
        assert len(files) == len(text.strip().splitlines())
        for name in files:
            assert (tmp_path / "all" / (name + ".manifest.json")).exists()

    def test_spec_file(self, tmp_path, capsys):
        spec = tmp_path / "custom.json"
        spec.write_text(json.dumps({"pulses": [{"action": "project", "onto": "-Z"}, {"action": "tomograph"}]}))
        code, text = run(["model", "--ideal", "--spec", spec], capsys)
        assert code == 0 and text.startswith("spec=custom")

    def test_embeds_protocol(self, tmp_path, capsys):
        out = tmp_path / "m.json"
        run(["model", "--calibrated", "--spec", "fig3a", "--out", out], capsys)
        doc = json.loads(out.read_text())
        assert ProtocolConfig.from_json(doc["protocol"]) == ProtocolConfig.calibrated()
        assert doc["manifest"] == "m.json.manifest.json"


class TestSimulate:
    def test_seeded_runs_identical(self, tmp_path, capsys):
        for name in ("a.bin", "b.bin"):
            assert run(["simulate", "--duration", "0.01", "--seed", "42", "--out", tmp_path / name], capsys)[0] == 0
        assert sha(tmp_path / "a.bin") == sha(tmp_path / "b.bin")

    def test_summary_reports_predicted_rate(self, tmp_path, capsys):
        code, text = run(["simulate", "--duration", "0.01", "--out", tmp_path / "a.bin"], capsys)
        s = summary_of(text)
        assert code == 0
        assert float(s["predicted_pair_rate_hz"]) == pytest.approx(45.6e3, rel=0.01)
        assert 25e3 <= float(s["pair_rate_hz"]) <= 75e3

    def test_zero_efficiency_header_only(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"bank": {"efficiency": 0.0}, "duration": 0.001})
        code, text = run(["simulate", "--config", cfg, "--out", tmp_path / "e.bin"], capsys)
        raw = (tmp_path / "e.bin").read_bytes()
        assert code == 0 and summary_of(text)["events"] == "0"
        assert len(raw) == HEADER.size and raw[:6] == MAGIC

    def test_csv_and_manifest(self, tmp_path, capsys):
        out, side = tmp_path / "a.bin", tmp_path / "a.csv"
        run(["simulate", "--duration", "0.001", "--seed", "5", "--out", out, "--csv", side], capsys)
        rows = list(csv.reader(side.open()))
        assert rows[0][0] == "time_ps"
        m = json.loads(open(manifest_path(out)).read())
        assert m["command"] == "simulate" and m["seed"] == 5
        assert m["resolved_config"]["seed"] == 5 and m["resolved_config"]["duration"] == 0.001
        assert str(side) in m["outputs"]


class TestPipeline:
    def test_row_8_reconstruction(self, ideal_pipeline):
        doc = json.loads((ideal_pipeline / "tomo.json").read_text())
        dm = DensityMatrix.from_json(doc["dm"])
        assert doc["counts_used"] > 5000
        assert fidelity(dm, table_state(8).to_dm().relabel(dm.register)) > 0.95
        assert doc["metrics_vs_ideal"]["negativity"]["value"] == pytest.approx(0.5, abs=0.05)

    def test_config_echo(self, ideal_pipeline):
        sim = json.loads(open(manifest_path(ideal_pipeline / "tags.bin")).read())
        counts = json.loads((ideal_pipeline / "counts.json").read_text())
        tomo = json.loads((ideal_pipeline / "tomo.json").read_text())
        assert counts["config"] == sim["resolved_config"]
        assert tomo["config"] == sim["resolved_config"]

    def test_manifest_hashes_inputs(self, ideal_pipeline):
        m = json.loads(open(manifest_path(ideal_pipeline / "counts.json")).read())
        tags = str(ideal_pipeline / "tags.bin")
        assert m["input_sha256"][tags] == sha(tags)
        assert m["version"]

    def test_fit_d_on_full_determinism(self, half_counts, tmp_path, capsys):
        out = tmp_path / "d.json"
        code, text = run(["fit-d", half_counts / "counts.json", "--boot", "20", "--out", out], capsys)
        assert code == 0
        assert json.loads(out.read_text())["d_hat"] >= 0.97
        assert "d_hat=" in text

    def test_report(self, half_counts, tmp_path, capsys):
        out = tmp_path / "report.csv"
        code, text = run(["report", half_counts / "counts.json", "--boot", "10", "--out", out], capsys)
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert tuple(rows[0]) == REPORT_COLUMNS
        by_name = {r["request"]: r for r in rows}
        assert float(by_name["three_pulse"]["d_hat"]) >= 0.97
        assert float(by_name["fig3a"]["fidelity_ideal"]) > 0.95
        assert by_name["five_pulse"]["counts_used"] == "0"
        figs = sorted(p.name for p in tmp_path.glob("report_*.png"))
        assert "report_three_pulse.png" in figs and "report_five_pulse.png" not in figs
        for f in figs:
            assert (tmp_path / f).read_bytes()[:4] == b"\x89PNG"
        assert "request" in text.splitlines()[0]

    def test_idempotent(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"duration": 0.005, "seed": 9})
        stages = [
            ["simulate", "--config", cfg, "--out", tmp_path / "t.bin"],
            ["correlate", tmp_path / "t.bin", "--out", tmp_path / "c.out.json", "--events", tmp_path / "ev.csv"],
            ["tomo", tmp_path / "c.out.json", "--spec", "fig2a", "--boot", "5", "--out", tmp_path / "tomo.json"],
            ["fit-d", tmp_path / "c.out.json", "--boot", "5", "--out", tmp_path / "fit.json"],
            ["report", tmp_path / "c.out.json", "--boot", "5", "--out", tmp_path / "r.csv"],
        ]

        def snapshot():
            return {p.name: sha(p) for p in sorted(tmp_path.iterdir())}

        for argv in stages:
            assert run(argv, capsys)[0] == 0
        first = snapshot()
        for argv in stages:
            assert run(argv, capsys)[0] == 0
        assert snapshot() == first
        assert any(name.endswith(".png") for name in first)


class TestCorrelate:
    def test_gap_three_file(self, tmp_path, capsys):
        from qknit.tags import TagStream, empty_records, write_tags

        pulses = np.arange(0, 3000, 3)
        rec = empty_records(len(pulses))
        rec["time"] = pulses * 2193 + 50
        rec["detector"] = pulses % 6
        write_tags(tmp_path / "g.bin", TagStream(rec, 2193))
        code, text = run(["correlate", tmp_path / "g.bin", "--out", tmp_path / "c.json"], capsys)
        assert code == 0
        assert summary_of(text)["pairs"] == "0"
        assert CountsTable.from_json(json.loads((tmp_path / "c.json").read_text())).total == 0


class TestExitCodes:
    def test_usage(self):
        with pytest.raises(SystemExit) as info:
            main(["bogus"])
        assert info.value.code == 2

    def test_invalid_spec(self, capsys):
        assert main(["model", "--spec", "no_such_spec"]) == 3
        assert "unknown spec" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"bank": {"efficiency": 2.0}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x.bin")]) == 3
        cfg = write_config(tmp_path / "d.json", {"durration": 1})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x.bin")]) == 3

    def test_missing_input(self, tmp_path):
        assert main(["correlate", str(tmp_path / "none.bin"), "--out", str(tmp_path / "c.json")]) == 4

    def test_version_mismatch(self, tmp_path):
        (tmp_path / "v.bin").write_bytes(HEADER.pack(MAGIC, 99, 2193))
        assert main(["correlate", str(tmp_path / "v.bin"), "--out", str(tmp_path / "c.json")]) == 5

    def test_truncated(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(HEADER.pack(MAGIC, 1, 2193) + b"\x00" * 7)
        assert main(["correlate", str(tmp_path / "t.bin"), "--out", str(tmp_path / "c.json")]) == 6

    def test_malformed_counts(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert main(["tomo", str(tmp_path / "c.json")]) == 7
        (tmp_path / "d.json").write_text(json.dumps({"cells": {"gaps=9|bases=Q|out=+Q": 1}}))
        assert main(["tomo", str(tmp_path / "d.json")]) == 7

    def test_impossible_conditioning(self, tmp_path):
        spec = tmp_path / "s.json"
        pulses = [{"action": "project", "onto": "-Z"}, {"action": "skip"}, {"action": "project", "onto": "-Z"}, {"action": "tomograph"}]
        spec.write_text(json.dumps({"pulses": pulses}))
        assert main(["model", "--ideal", "--spec", str(spec)]) == 8

    def test_insufficient_counts(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps(CountsTable().to_json()))
        assert main(["tomo", str(tmp_path / "c.json")]) == 9

    def test_codes_distinct(self):
        from qknit import errors

        codes = [
            cls.exit_code
            for cls in vars(errors).values()
            if isinstance(cls, type) and issubclass(cls, errors.QknitError) and cls is not errors.QknitError
        ]
        assert len(codes) == len(set(codes))
        assert 0 not in codes and 2 not in codes and 4 not in codes

    def test_thread_cap(self, monkeypatch, capsys):
        monkeypatch.setenv("QKNIT_THREADS", "zero")
        assert main(["model", "--spec", "fig2a"]) == 3
        monkeypatch.setenv("QKNIT_THREADS", "1")
        assert main(["model", "--spec", "fig2a"]) == 0


class TestEntryPoint:
    def test_module_runs(self):
        res = subprocess.run([sys.executable, "-m", "qknit", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and res.stdout.startswith("qknit ")

    def test_module_usage_error(self):
        res = subprocess.run([sys.executable, "-m", "qknit"], capture_output=True, text=True)
        assert res.returncode == 2
