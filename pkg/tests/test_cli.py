"""CLI behavior: flags, exit codes, file outputs, determinism."""

import json
import subprocess
import sys

import numpy as np
import pytest

from shiftquant.cli import main
from shiftquant.engine import run_float
from shiftquant.modelio import load_model, read_tensor, save_model, write_tensor

from graphs import build_basic_block


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Saved float model + calibration and input blobs on disk."""
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(55)
    model = build_basic_block(rng)
    save_model(model, d / "m.json", d / "m.bin")
    write_tensor(d / "calib.bin", rng.normal(0.0, 1.0, (4, 4, 6, 6)))
    write_tensor(d / "x.bin", rng.normal(0.0, 1.0, (2, 4, 6, 6)))
    write_tensor(d / "zeros.bin", np.zeros((2, 4, 6, 6)))
    return d, model


@pytest.fixture(scope="module")
def quantized(ws):
    d, _ = ws
    code = main([
        "quantize", "--model", str(d / "m.json"), "--calib", str(d / "calib.bin"),
        "--out", str(d / "q.json"),
    ])
    assert code == 0
    return d / "q.json"


class TestQuantize:
    def test_writes_model_and_summary(self, ws, capsys):
        d, _ = ws
        code = main([
            "quantize", "--model", str(d / "m.json"), "--blobs", str(d / "m.bin"),
            "--calib", str(d / "calib.bin"), "--out", str(d / "qs.json"),
        ])
        out = capsys.readouterr().out
        assert code == 0
        assert (d / "qs.json").exists() and (d / "qs.bin").exists()
        # one summary row per unified module, plus totals
        assert out.splitlines()[0].split()[:2] == ["module", "case"]
        assert any(line.startswith("r1 ") for line in out.splitlines())
        assert any(line.startswith("r2 ") for line in out.splitlines())
        assert "total evaluations:" in out
        assert "wall time:" in out

    def test_tau_zero_single_candidate(self, ws, capsys):
        d, _ = ws
        code = main([
            "quantize", "--model", str(d / "m.json"), "--calib", str(d / "calib.bin"),
            "--tau", "0", "--out", str(d / "q0.json"),
        ])
        out = capsys.readouterr().out
        assert code == 0
        for label in ("r1", "r2"):
            row = next(l for l in out.splitlines() if l.startswith(f"{label} "))
            assert row.split()[-1] == "1"
        assert "total evaluations: 3" in out

    def test_missing_calib_is_usage_error(self, ws):
        d, _ = ws
        with pytest.raises(SystemExit) as e:
            main(["quantize", "--model", str(d / "m.json"), "--out", str(d / "nope.json")])
        assert e.value.code == 2

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["decompile"])
        assert e.value.code == 2

    def test_missing_model_file_is_runtime_error(self, ws, capsys):
        d, _ = ws
        code = main([
            "quantize", "--model", str(d / "absent.json"),
            "--calib", str(d / "calib.bin"), "--out", str(d / "nope.json"),
        ])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_threads_env_does_not_change_output(self, ws, monkeypatch):
        d, _ = ws
        main(["quantize", "--model", str(d / "m.json"), "--calib", str(d / "calib.bin"),
              "--out", str(d / "t1.json")])
        monkeypatch.setenv("SHIFTQUANT_THREADS", "3")
        main(["quantize", "--model", str(d / "m.json"), "--calib", str(d / "calib.bin"),
              "--out", str(d / "t3.json")])
        a = (d / "t1.json").read_text().replace("t1.bin", "X")
        b = (d / "t3.json").read_text().replace("t3.bin", "X")
        assert a == b
        assert (d / "t1.bin").read_bytes() == (d / "t3.bin").read_bytes()

    def test_six_bit_flag(self, ws, capsys):
        d, _ = ws
        code = main([
            "quantize", "--model", str(d / "m.json"), "--calib", str(d / "calib.bin"),
            "--bits", "6", "--out", str(d / "q6.json"),
        ])
        assert code == 0
        assert json.loads((d / "q6.json").read_text())["bit_width"] == 6


class TestInfer:
    def test_engines_agree_byte_for_byte(self, ws, quantized, capsys):
        d, _ = ws
        for eng in ("int", "float"):
            code = main([
                "infer", "--model", str(quantized), "--input", str(d / "x.bin"),
                "--out", str(d / f"y_{eng}.bin"), "--engine", eng,
            ])
            assert code == 0
        assert (d / "y_int.bin").read_bytes() == (d / "y_float.bin").read_bytes()

    def test_float_model_inference_matches_library(self, ws, capsys):
        d, _ = ws
        code = main([
            "infer", "--model", str(d / "m.json"), "--input", str(d / "x.bin"),
            "--out", str(d / "y_ref.bin"), "--engine", "float",
        ])
        assert code == 0
        got = read_tensor(d / "y_ref.bin")
        # reference must use the weights as stored on disk (float32)
        loaded = load_model(d / "m.json")
        want = run_float(loaded, read_tensor(d / "x.bin").astype(np.float64))
        assert got.dtype == np.float32
        assert np.array_equal(got, want.astype(np.float32))

    def test_int_engine_rejects_float_model(self, ws, capsys):
        d, _ = ws
        code = main([
            "infer", "--model", str(d / "m.json"), "--input", str(d / "x.bin"),
            "--out", str(d / "nope.bin"), "--engine", "int",
        ])
        assert code == 1
        assert "quantized" in capsys.readouterr().err

    def test_zero_input_is_deterministic(self, ws, quantized, capsys):
        d, _ = ws
        for name in ("z1.bin", "z2.bin"):
            assert main([
                "infer", "--model", str(quantized), "--input", str(d / "zeros.bin"),
                "--out", str(d / name),
            ]) == 0
        raw = (d / "z1.bin").read_bytes()
        assert raw == (d / "z2.bin").read_bytes()
        out = read_tensor(d / "z1.bin")
        # both batch samples see the same constant, bias-driven activations
        assert np.array_equal(out[0], out[1])

    def test_bad_engine_is_usage_error(self, ws, quantized):
        d, _ = ws
        with pytest.raises(SystemExit) as e:
            main(["infer", "--model", str(quantized), "--input", str(d / "x.bin"),
                  "--out", str(d / "nope.bin"), "--engine", "fast"])
        assert e.value.code == 2


class TestReport:
    def test_json_report(self, ws, quantized, capsys):
        d, _ = ws
        code = main([
            "report", "--model", str(quantized), "--float-model", str(d / "m.json"),
            "--calib", str(d / "calib.bin"), "--format", "json",
        ])
        assert code == 0
        rep = json.loads(capsys.readouterr().out)
        assert [m["label"] for m in rep["modules"]] == ["r1", "r2"]
        assert rep["quant_ops"] == {"fused": 2, "naive": 5}
        assert all(v >= 1 for v in rep["shift_histogram"].values())
        assert all(m["mse"] >= 0 for m in rep["modules"])

    def test_csv_report_sections(self, ws, quantized, capsys):
        d, _ = ws
        code = main([
            "report", "--model", str(quantized), "--float-model", str(d / "m.json"),
            "--calib", str(d / "calib.bin"), "--format", "csv",
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert out.startswith("module,case,mse\n")
        assert "\nshift,count\n" in out
        assert "\nmetric,value\n" in out
        assert "fused_quant_ops,2" in out
        assert "naive_quant_ops,5" in out

    def test_reports_are_byte_identical_across_runs(self, ws, quantized, capsys):
        d, _ = ws
        texts = []
        for fmt in ("json", "csv"):
            for _ in range(2):
                assert main([
                    "report", "--model", str(quantized),
                    "--float-model", str(d / "m.json"),
                    "--calib", str(d / "calib.bin"), "--format", fmt,
                ]) == 0
                texts.append(capsys.readouterr().out)
        assert texts[0] == texts[1]
        assert texts[2] == texts[3]

    def test_report_to_file(self, ws, quantized, capsys):
        d, _ = ws
        code = main([
            "report", "--model", str(quantized), "--float-model", str(d / "m.json"),
            "--calib", str(d / "calib.bin"), "--format", "csv",
            "--out", str(d / "rep.csv"),
        ])
        assert code == 0
        assert (d / "rep.csv").read_text().startswith("module,case,mse\n")


class TestRealProcess:
    def test_module_entrypoint(self, ws, quantized):
        d, _ = ws
        proc = subprocess.run(
            [sys.executable, "-m", "shiftquant", "infer", "--model", str(quantized),
             "--input", str(d / "x.bin"), "--out", str(d / "y_proc.bin")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (d / "y_proc.bin").exists()

    def test_usage_error_exit_code(self):
        proc = subprocess.run(
            [sys.executable, "-m", "shiftquant", "quantize"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2

    def test_runtime_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        proc = subprocess.run(
            [sys.executable, "-m", "shiftquant", "infer", "--model", str(bad),
             "--input", str(bad), "--out", str(tmp_path / "y.bin")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1
        assert "error:" in proc.stderr
