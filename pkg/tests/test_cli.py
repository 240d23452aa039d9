import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rnnpool.cli import main, read_raw, write_raw
from rnnpool.graph import Conv2d, FullyConnected, NetworkSpec, RnnPoolLayer
from rnnpool.modelfile import dump_model
from rnnpool.presets import PRESET_NAMES

GOLDEN = Path(__file__).parent / "golden"


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def small_model(tmp_path, **kw):
    net = NetworkSpec("small", (16, 16, 2), [Conv2d(3, 3, 4, 1, 1), RnnPoolLayer(4, 4, 4, 4, 4),
                                             FullyConnected(3)])
    path = tmp_path / "small.json"
    path.write_text(dump_model(net, **kw))
    return path


def test_analyze_human_output(capsys):
    code, out, _ = run_cli(capsys, "analyze", "preset:mobilenetv2-rnnpool",
                           "--convention", "layerbylayer")
    assert code == 0 and "0.24 MiB" in out
    code, out, _ = run_cli(capsys, "analyze", "preset:mobilenetv2")
    assert code == 0 and "2408448 bytes" in out


def test_analyze_dtype_flag_and_env(capsys, monkeypatch):
    _, out, _ = run_cli(capsys, "analyze", "preset:mobilenetv2", "--dtype", "i8", "--json")
    assert json.loads(out)["report"]["peak_bytes"] == 2408448 // 4
    monkeypatch.setenv("RNNPOOL_DTYPE", "i8")
    _, out, _ = run_cli(capsys, "analyze", "preset:mobilenetv2", "--json")
    assert json.loads(out)["report"]["dtype"] == "int8"
    monkeypatch.setenv("RNNPOOL_DTYPE", "f16")
    assert run_cli(capsys, "analyze", "preset:mobilenetv2")[0] == 2


@pytest.mark.parametrize("argv,golden", [
    (["analyze", "preset:mobilenetv2-rnnpool", "--json"], "analyze_mobilenetv2-rnnpool.json"),
    (["analyze", "preset:resnet18", "--convention", "rowwise", "--json"],
     "analyze_resnet18_rowwise.json"),
    (["madds", "preset:mobilenetv2-rnnpool", "--json"], "madds_mobilenetv2-rnnpool.json"),
    (["presets", "--json"], "presets.json"),
    (["enumerate", str(GOLDEN / "diamond_dag.json"), "--json"], "enumerate_diamond.json"),
])
def test_json_golden(capsys, argv, golden):
    code, out, _ = run_cli(capsys, *argv)
    assert code == 0
    assert json.loads(out) == json.loads((GOLDEN / golden).read_text())


def test_diamond_peak_is_six(capsys):
    _, out, _ = run_cli(capsys, "enumerate", str(GOLDEN / "diamond_dag.json"))
    assert "minimum peak: 6" in out


def test_presets_list(capsys):
    code, out, _ = run_cli(capsys, "presets")
    assert out.split() == list(PRESET_NAMES)


def test_madds_preset(capsys):
    _, out, _ = run_cli(capsys, "madds", "preset:mobilenetv2-rnnpool", "--json")
    doc = json.loads(out)
    assert doc["madds"]["total"] == sum(l["value"] for l in doc["madds"]["layers"])
    _, out, _ = run_cli(capsys, "madds", "preset:mobilenetv2", "--budget-mib", "inf", "--json")
    doc = json.loads(out)
    assert doc["recompute_madds"] == doc["madds"]["total"]


def test_gradcheck(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--h1", "2", "--h2", "2", "--patch", "3", "--json")
    doc = json.loads(out)
    assert code == 0 and doc["ok"] and doc["max_rel_error"] < 1e-4


def test_schema_violation_exit_code(capsys, tmp_path):
    doc = {"name": "bad", "input_shape": [8, 8, 3],
           "layers": [{"op": "conv2d", "kh": 3, "kw": 3, "c_out": 4, "stride": 3, "pad": 1}]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    code, _, err = run_cli(capsys, "analyze", str(path))
    assert code == 2
    assert "layers/0/stride" in err and "layer 0" in err


def test_usage_errors(capsys, tmp_path):
    assert run_cli(capsys, "analyze", "preset:nope")[0] == 2
    assert run_cli(capsys, "analyze", str(tmp_path / "missing.json"))[0] == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert run_cli(capsys, "analyze", str(tmp_path / "junk.json"))[0] == 2
    (tmp_path / "big.json").write_text(json.dumps(
        {"nodes": [{"id": i, "size": 1, "deps": [i - 1] if i else []} for i in range(20)]}))
    assert run_cli(capsys, "enumerate", str(tmp_path / "big.json"))[0] == 2
    with pytest.raises(SystemExit) as exc:
        main(["analyze"])
    assert exc.value.code == 2


def test_runtime_error_exit_code(capsys, tmp_path):
    # the integer path needs quantized nonlinearities; a smooth-cell net fails at runtime
    code, _, err = run_cli(capsys, "madds", "preset:mobilenetv2", "--budget-mib", "0.001")
    assert code == 1 and "error:" in err


def test_run_naive_and_stream(capsys, tmp_path):
    model = small_model(tmp_path)
    x = np.random.default_rng(0).standard_normal((16, 16, 2)).astype(np.float32)
    write_raw(tmp_path / "x.raw", x)
    outs = {}
    for sched in ("naive", "stream"):
        code, out, _ = run_cli(capsys, "run", str(model), str(tmp_path / "x.raw"), "--schedule",
                               sched, "--out", str(tmp_path / f"{sched}.raw"), "--arena-log",
                               str(tmp_path / f"{sched}.csv"), "--json", "--seed", "4")
        assert code == 0
        doc = json.loads(out)
        assert doc["output_shape"] == [1, 1, 3]
        outs[sched] = read_raw(tmp_path / f"{sched}.raw")
        assert (tmp_path / f"{sched}.csv").read_text().startswith("step,layer")
    assert np.allclose(outs["naive"], outs["stream"], rtol=1e-5, atol=1e-6)


def test_run_is_deterministic_given_seed(capsys, tmp_path):
    model = small_model(tmp_path)
    write_raw(tmp_path / "x.raw", np.ones((16, 16, 2), np.float32))
    a = run_cli(capsys, "run", str(model), str(tmp_path / "x.raw"), "--json", "--seed", "1")[1]
    b = run_cli(capsys, "run", str(model), str(tmp_path / "x.raw"), "--json", "--seed", "1")[1]
    c = run_cli(capsys, "run", str(model), str(tmp_path / "x.raw"), "--json", "--seed", "2")[1]
    assert a == b and a != c


def test_raw_header_mismatch(capsys, tmp_path):
    model = small_model(tmp_path)
    (tmp_path / "x.raw").write_bytes(np.array([16, 16, 2], "<u4").tobytes() + b"\0" * 8)
    assert run_cli(capsys, "run", str(model), str(tmp_path / "x.raw"))[0] == 2
    write_raw(tmp_path / "y.raw", np.ones((8, 8, 2), np.float32))
    assert run_cli(capsys, "run", str(model), str(tmp_path / "y.raw"))[0] == 2


def test_quantize_command(capsys, tmp_path):
    from rnnpool.quant import load_quantized
    model = small_model(tmp_path)
    code, out, _ = run_cli(capsys, "quantize", str(model), str(tmp_path / "q.rpq"), "--json")
    assert code == 0
    assert json.loads(out)["tensors"] == len(load_quantized(tmp_path / "q.rpq"))


def test_weights_reference_in_model_file(capsys, tmp_path):
    from rnnpool.graph import init_weights, lower, save_weights
    net = NetworkSpec("w", (8, 8, 1), [Conv2d(3, 3, 2, 1, 1), FullyConnected(2)])
    save_weights(tmp_path / "w.npz", init_weights(lower(net), rng=9))
    (tmp_path / "m.json").write_text(dump_model(net, str(tmp_path / "w.npz")))
    write_raw(tmp_path / "x.raw", np.ones((8, 8, 1), np.float32))
    a = run_cli(capsys, "run", str(tmp_path / "m.json"), str(tmp_path / "x.raw"), "--json",
                "--seed", "1")[1]
    b = run_cli(capsys, "run", str(tmp_path / "m.json"), str(tmp_path / "x.raw"), "--json",
                "--seed", "2")[1]
    assert json.loads(a)["output"] == json.loads(b)["output"]


def test_probe_command(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "probe", "lines-multiclass", "--h1", "4", "--h2", "4",
                           "--epochs", "1", "--train", "64", "--test", "32", "--json",
                           "--export", str(tmp_path / "imgs"))
    doc = json.loads(out)
    assert code == 0 and len(doc["curve"]) == 1
    assert (tmp_path / "imgs" / "labels.csv").exists()


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rnnpool.cli", "presets"], capture_output=True,
                          text=True, env=dict(os.environ))
    assert proc.returncode == 0 and "mobilenetv2" in proc.stdout
