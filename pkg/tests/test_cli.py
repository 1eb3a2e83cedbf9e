import json
import subprocess
import sys

import pytest

from sparseseg.cli import main

TINY = ["--set", "encoder.extents=[16,16,16]", "--set", "encoder.dim=16", "--set", "encoder.heads=2",
        "--set", "encoder.depth=4", "--set", "encoder.stp_after=[2]", "--set", "decoder.channels=[8,8,4,4]",
        "--set", "train.epochs=2", "--set", "train.num_train=2", "--set", "train.num_val=1"]


def run(argv, out):
    code = main([*argv, "--out", str(out)])
    return code, json.loads((out / "report.json").read_text())


def test_sample_check_symmetric(tmp_path, capsys):
    code, report = run(["sample-check", "--n", "6", "--k", "2", "--trials", "100000"], tmp_path)
    assert code == 0 and report["ok"]
    assert max(report["deviations"]) <= 0.01
    out = capsys.readouterr().out
    assert "--- report ---" in out and "--- end report ---" in out


def test_sample_check_monotone(tmp_path):
    code, report = run(["sample-check", "--scores", "0.1,0.2,0.3,0.5,0.7,0.9", "--trials", "50000"], tmp_path)
    assert code == 0 and report["check"] == "monotone"


def test_sample_check_tolerance_violation_exits_nonzero(tmp_path):
    code, report = run(["sample-check", "--trials", "1000", "--tol", "0.0"], tmp_path)
    assert code == 1 and not report["ok"]


def test_bench_compare(tmp_path):
    code, report = run(["bench", "--compare", "r=0,0.5,0.9"], tmp_path)
    assert code == 0
    totals = [run_["macs"]["encoder_total"] for run_ in report["runs"]]
    assert len(totals) == 3 and totals[0] > totals[1] > totals[2]
    assert (tmp_path / "macs.png").stat().st_size > 0


def test_bad_compare_argument(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["bench", "--compare", "tau=1", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_infer_requires_checkpoint(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["infer", "--out", str(tmp_path)])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["infer", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)])
    assert info.value.code == 2


def test_invalid_config_reports_error(tmp_path, capsys):
    code, report = run(["sample-check", "--set", "encoder.r=1.5"], tmp_path)
    assert code == 1 and "encoder.r" in report["error"]
    assert "encoder.r" in capsys.readouterr().err


def test_config_file_and_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"encoder": {"tau": 0.1}, "optimiser": {}}))
    code, report = run(["bench", "--config", str(cfg)], tmp_path / "out")
    assert code == 1 and "optimiser" in report["error"]


def test_train_infer_depth_map_roundtrip(tmp_path):
    code, report = run(["train", *TINY], tmp_path / "train")
    assert code == 0 and report["steps"] == 2
    ckpt = tmp_path / "train" / "model.ckpt"
    assert ckpt.exists() and (tmp_path / "train" / "loss.png").exists()
    lines = (tmp_path / "train" / "metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["step"] == 0 and "dsc" in json.loads(lines[-1])

    code, report = run(["infer", "--checkpoint", str(ckpt), "--sample-seed", "3"], tmp_path / "infer")
    assert code == 0 and report["shape"] == [16, 16, 16] and "metrics" in report
    assert (tmp_path / "infer" / "prediction.npy").exists()

    code, report = run(["depth-map", "--checkpoint", str(ckpt)], tmp_path / "dm")
    assert code == 0 and report["histogram"] == {"1": 4, "survived": 4}
    for name in ("depth_map.txt", "depth_map.pgm", "depth_map.png"):
        assert (tmp_path / "dm" / name).exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sparseseg", "sample-check", "--trials", "20000",
                           "--out", str(tmp_path)], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "report.json").read_text())["ok"]
