import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml

from conftest import FIXTURES, MODELS, copy_model, vector_io, write_model
from zoorun.cli import main, parse_tile
from zoorun.errors import UsageError
from zoorun.fetch import sha256_bytes
from zoorun.ndtensor import from_array, read_zrt, write_zrt


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("ZOORUN_REGISTRY", str(FIXTURES / "registry.json"))
    monkeypatch.setenv("ZOORUN_ENGINES", str(tmp_path / "engines"))
    monkeypatch.setenv("ZOORUN_MODELS", str(tmp_path / "models"))
    monkeypatch.setenv("ZOORUN_INDEX", str(FIXTURES / "zoo" / "index.json"))
    return tmp_path


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# -- engines ------------------------------------------------------------------

def test_engines_resolve(env, capsys):
    code, out, _ = run(capsys, "engines", "resolve", "pytorch", "1.4.2")
    assert code == 0
    assert out.split("\t")[:2] == ["pytorch", "1.4.0"]


def test_engines_resolve_json(env, capsys):
    code, out, _ = run(capsys, "engines", "resolve", "onnx", "1.5.0", "--json")
    assert code == 0
    assert json.loads(out)["version"] == "1.10.2"


def test_engines_resolve_none(env, capsys):
    code, _, err = run(capsys, "engines", "resolve", "pytorch", "3.0.0")
    assert code == 3
    assert "pytorch" in err


def test_engines_install_unknown(env, capsys):
    code, out, err = run(capsys, "engines", "install", "nosuch", "9.9.9")
    assert code == 3
    assert out == "" and err.startswith("error:")


def test_engines_list_empty(env, capsys):
    assert run(capsys, "engines", "list") == (0, "", "")


def test_engines_install_then_list(env, capsys):
    code, out, _ = run(capsys, "engines", "install", "reference", "1.0.0")
    assert code == 0
    status, *row, path = out.strip().split("\t")
    assert status == "installed"
    assert row == ["reference", "1.0.0", "any", "any", "cpu"]
    assert not os.path.isabs(path)
    code, out, _ = run(capsys, "engines", "install", "reference", "1.0.0")
    assert out.startswith("cached\t")
    code, out, _ = run(capsys, "engines", "list")
    assert out == "reference\t1.0.0\tany\tany\tcpu\n"


def test_engines_missing_version_is_usage(env, capsys):
    assert run(capsys, "engines", "resolve", "pytorch")[0] == 1


# -- models -------------------------------------------------------------------

def test_models_search_all(env, capsys):
    code, out, _ = run(capsys, "models", "search", "")
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("blur\tBox blur\t")


def test_models_search_none(env, capsys):
    assert run(capsys, "models", "search", "zzz") == (0, "", "")


def test_models_search_needs_index(env, capsys, monkeypatch):
    monkeypatch.delenv("ZOORUN_INDEX")
    assert run(capsys, "models", "search", "x")[0] == 1


def test_models_download_twice(env, capsys):
    code, out, _ = run(capsys, "models", "download", "blur")
    assert code == 0
    assert out == "downloaded\tblur\tmodels/blur\n"
    code, out, _ = run(capsys, "models", "download", "blur")
    assert code == 0
    assert out == "cached\tblur\tmodels/blur\n"


def test_models_download_unknown(env, capsys):
    assert run(capsys, "models", "download", "nosuch")[0] == 1


def test_models_download_checksum_exit(env, capsys, monkeypatch):
    zoo = env / "zoo"
    zoo.mkdir()
    blob = (FIXTURES / "zoo" / "blur.zip").read_bytes()
    (zoo / "blur.zip").write_bytes(blob[:-1] + bytes([blob[-1] ^ 1]))
    rec = {"id": "blur", "name": "b", "download_url": "blur.zip", "sha256": sha256_bytes(blob)}
    (zoo / "index.json").write_text(json.dumps({"records": [rec]}))
    monkeypatch.setenv("ZOORUN_INDEX", str(zoo / "index.json"))
    code, _, err = run(capsys, "models", "download", "blur")
    assert code == 4
    assert "checksum" in err.lower() or "sha256" in err.lower()


def test_models_info(env, capsys):
    code, out, _ = run(capsys, "models", "info", str(MODELS / "identity"))
    assert code == 0
    rows = [line.split("\t") for line in out.splitlines()]
    inputs = [r for r in rows if r[0] == "input"]
    outputs = [r for r in rows if r[0] == "output"]
    weights = [r for r in rows if r[0] == "weights"]
    assert len(inputs) == 1 and inputs[0][2] == "byxc"
    assert len(outputs) == 1
    assert [w[1] for w in weights] == ["reference_graph"]


def test_models_info_details(env, capsys):
    code, out, _ = run(capsys, "models", "info", str(MODELS / "affine" / "rdf.yaml"))
    assert code == 0
    assert "weights\treference_graph\t2.0.0" in out
    assert "preprocessing\traw\tzero_mean_unit_variance(axes=yx, mode=per_sample)" in out
    assert "postprocessing\tprob\tscale_linear(gain=2.0, offset=-1.0)" in out
    assert "halo 0,0,0,0" in out


def test_models_info_json(env, capsys):
    code, out, _ = run(capsys, "models", "info", str(MODELS / "pool"), "--json")
    doc = json.loads(out)
    assert [w["format"] for w in doc["weights"]] == ["tensorflow_js", "reference_graph"]
    assert doc["outputs"][0]["data_type"] == "float64"


def test_models_info_invalid_descriptor(env, capsys):
    model = copy_model("blur", env)
    rdf = yaml.safe_load((model / "rdf.yaml").read_text())
    rdf["inputs"][0]["axes"] = "byyc"
    (model / "rdf.yaml").write_text(yaml.safe_dump(rdf))
    code, _, err = run(capsys, "models", "info", str(model))
    assert code == 2
    assert "axes" in err


def test_models_info_by_downloaded_id(env, capsys):
    run(capsys, "models", "download", "segment")
    code, out, _ = run(capsys, "models", "info", "segment")
    assert code == 0 and "Threshold segmentation" in out


# -- run ----------------------------------------------------------------------

def _identity_model(dest):
    inputs, outputs = vector_io("raw", "out")
    graph = {"inputs": ["raw"], "outputs": ["raw"], "ops": []}
    return write_model(dest / "ident", graph, inputs, outputs)


def test_run_identity_byte_identical(env, capsys):
    model = _identity_model(env)
    x = from_array("raw", "x", np.array([1.5, -2.0, np.inf, 7.0], np.float32))
    write_zrt(env / "x.zrt", x)
    code, out, _ = run(capsys, "run", str(model), "x.zrt", "-o", "out")
    assert code == 0
    assert out == "out\tx\t4\tfloat32\tout/out.zrt\n"
    assert read_zrt(env / "out" / "out.zrt").tobytes() == x.tobytes()


def test_run_tiled_equals_untiled(env, capsys):
    rng = np.random.default_rng(5)
    write_zrt(env / "img.zrt", from_array("raw", "byxc", rng.normal(size=(1, 16, 16, 1)).astype(np.float32)))
    assert run(capsys, "run", str(MODELS / "blur"), "img.zrt", "--tile", "y=10,x=10", "-o", "tiled")[0] == 0
    assert run(capsys, "run", str(MODELS / "blur"), "img.zrt", "--no-tiling", "-o", "whole")[0] == 0
    a = (env / "tiled" / "blurred.zrt").read_bytes()
    b = (env / "whole" / "blurred.zrt").read_bytes()
    assert a == b


def test_run_bad_shape_names_axis(env, capsys):
    write_zrt(env / "bad.zrt", from_array("raw", "bcyx", np.zeros((1, 3, 8, 8), np.float32)))
    code, out, err = run(capsys, "run", str(MODELS / "affine"), "bad.zrt")
    assert code == 2
    assert "axis 'c'" in err
    assert out == ""


def test_run_by_index_id(env, capsys):
    x = read_zrt(MODELS / "segment" / "test_input_raw.zrt")
    write_zrt(env / "x.zrt", x)
    code, out, _ = run(capsys, "run", "segment", "x.zrt", "-o", "o")
    assert code == 0
    expected = (MODELS / "segment" / "test_output_mask.zrt").read_bytes()
    assert (env / "o" / "mask.zrt").read_bytes() == expected
    assert (env / "models" / "segment" / "rdf.yaml").is_file()


def test_run_no_install(env, capsys):
    write_zrt(env / "x.zrt", read_zrt(MODELS / "blur" / "test_input_raw.zrt"))
    code, _, err = run(capsys, "run", str(MODELS / "blur"), "x.zrt", "--no-install")
    assert code == 3
    assert "not installed" in err


def test_run_missing_input_file(env, capsys):
    code, _, err = run(capsys, "run", str(MODELS / "blur"), "nope.zrt")
    assert code == 1 and "nope.zrt" in err


def test_run_corrupt_input_file(env, capsys):
    (env / "junk.zrt").write_bytes(b"ZRT1garbage")
    assert run(capsys, "run", str(MODELS / "blur"), "junk.zrt")[0] == 2


def test_run_unknown_model(env, capsys):
    write_zrt(env / "x.zrt", read_zrt(MODELS / "blur" / "test_input_raw.zrt"))
    assert run(capsys, "run", "nosuch", "x.zrt")[0] == 1


def test_run_tile_flags_exclusive(env, capsys):
    assert run(capsys, "run", str(MODELS / "blur"), "x.zrt", "--tile", "4,4", "--no-tiling")[0] == 1


def test_parse_tile_forms():
    assert parse_tile("y=10,x=12") == {"y": 10, "x": 12}
    assert parse_tile("10,12") == {"y": 10, "x": 12}
    assert parse_tile("3,10,12") == {"z": 3, "y": 10, "x": 12}
    assert parse_tile(None) is None
    for bad in ("c=4", "y=0", "y=a", "1,2,3,4", "y=4,5"):
        with pytest.raises(UsageError):
            parse_tile(bad)


# -- test-model ---------------------------------------------------------------

@pytest.mark.parametrize("name", ["identity", "blur", "affine", "pool", "upsample", "segment"])
def test_test_model_passes(env, capsys, name):
    code, out, _ = run(capsys, "test-model", str(MODELS / name))
    lines = out.splitlines()
    assert code == 0
    assert lines[0] == "output\tverdict\tmax_abs_diff\ttolerance"
    assert lines[-1] == "PASS"
    assert all(line.split("\t")[1] == "PASS" for line in lines[1:-1])


def test_test_model_perturbed_fails(env, capsys):
    model = copy_model("blur", env)
    path = model / "test_output_blurred.zrt"
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0x40  # a high mantissa bit of the last element
    path.write_bytes(bytes(blob))
    rdf = yaml.safe_load((model / "rdf.yaml").read_text())
    rdf["test_outputs"][0]["sha256"] = sha256_bytes(bytes(blob))
    (model / "rdf.yaml").write_text(yaml.safe_dump(rdf))
    code, out, _ = run(capsys, "test-model", str(model))
    assert code == 2
    row = out.splitlines()[1].split("\t")
    assert row[:2] == ["blurred", "FAIL"]
    assert float(row[2]) > 1e-4
    assert out.splitlines()[-1] == "FAIL"


def test_test_model_without_tensors(env, capsys):
    model = copy_model("blur", env)
    rdf = yaml.safe_load((model / "rdf.yaml").read_text())
    del rdf["test_inputs"], rdf["test_outputs"]
    (model / "rdf.yaml").write_text(yaml.safe_dump(rdf))
    assert run(capsys, "test-model", str(model))[0] == 1


def test_test_model_tampered_tensor_exit_4(env, capsys):
    model = copy_model("blur", env)
    with open(model / "test_output_blurred.zrt", "ab") as fh:
        fh.write(b"x")
    assert run(capsys, "test-model", str(model))[0] == 4


def test_test_model_figures(env, capsys):
    code, out, _ = run(capsys, "test-model", str(MODELS / "affine"), "--figures", "fig")
    assert code == 0
    reports = [line.split("\t")[1] for line in out.splitlines() if line.startswith("report\t")]
    assert reports == ["fig/report.tsv", "fig/prob.png"]
    tsv = (env / "fig" / "report.tsv").read_text().splitlines()
    assert tsv[0] == "output\tverdict\tmax_abs_diff\ttolerance"
    assert tsv[1].startswith("prob\tPASS\t")
    assert (env / "fig" / "prob.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_test_model_json(env, capsys):
    code, out, _ = run(capsys, "test-model", str(MODELS / "segment"), "--json", "--tile", "y=8,x=8")
    doc = json.loads(out)
    assert code == 0 and doc["passed"] is True
    assert doc["outputs"][0]["output"] == "mask"
    assert doc["outputs"][0]["tolerance"] == "0"


def test_output_deterministic(env, capsys):
    first = run(capsys, "test-model", str(MODELS / "pool"))
    second = run(capsys, "test-model", str(MODELS / "pool"))
    assert first == second


# -- usage --------------------------------------------------------------------

@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["engines"], ["engines", "explode"],
                                  ["run", "m"], ["models", "info"]])
def test_usage_errors_exit_1(env, capsys, argv):
    assert run(capsys, *argv)[0] == 1


def test_help_exits_0(env, capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0 and "test-model" in out


def test_flag_overrides_env(env, capsys, tmp_path):
    other = tmp_path / "elsewhere"
    run(capsys, "engines", "install", "reference", "2.0.0", "--engines-dir", str(other))
    assert run(capsys, "engines", "list")[1] == ""
    assert run(capsys, "engines", "list", "--engines-dir", str(other))[1].startswith("reference\t2.0.0")


# -- restart invariant --------------------------------------------------------

def test_run_identical_across_process_restart(env, capsys):
    x = read_zrt(MODELS / "affine" / "test_input_raw.zrt")
    write_zrt(env / "x.zrt", x)

    # everything in one process
    assert run(capsys, "engines", "install", "reference", "2.0.0")[0] == 0
    assert run(capsys, "run", str(MODELS / "affine"), "x.zrt", "-o", "same")[0] == 0

    # install and run in two fresh interpreters against a separate engines dir
    child_env = dict(os.environ, ZOORUN_ENGINES=str(env / "engines2"))
    cmd = [sys.executable, "-m", "zoorun"]
    subprocess.run(cmd + ["engines", "install", "reference", "2.0.0"], env=child_env, check=True,
                   capture_output=True)
    subprocess.run(cmd + ["run", str(MODELS / "affine"), "x.zrt", "-o", "restarted", "--no-install"],
                   env=child_env, check=True, capture_output=True)
    assert (env / "same" / "prob.zrt").read_bytes() == (env / "restarted" / "prob.zrt").read_bytes()
    shutil.rmtree(env / "engines2")


def test_relative_engines_dir(env, capsys):
    code, out, _ = run(capsys, "test-model", str(MODELS / "blur"), "--engines-dir", "eng")
    assert code == 0 and out.endswith("PASS\n")
    assert (env / "eng").is_dir()
