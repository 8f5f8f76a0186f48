"""Regenerate the packaged engine registry and the test fixtures.

    python3 scripts/make_fixtures.py

Everything written is deterministic: fixed seeds, sorted keys, fixed zip
timestamps. Expected test outputs come from running the reference graphs
in-process through the same pre/post-processing pipeline the CLI uses.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import yaml

from zoorun.fetch import sha256_bytes, sha256_file
from zoorun.model_spec import load_descriptor
from zoorun.ndtensor import from_array, write_zrt
from zoorun.reference_engine import load_graph, run_graph
from zoorun.runner import predict
from zoorun.zoo import build_archive

ROOT = Path(__file__).resolve().parent.parent
PACKAGE_DATA = ROOT / "src" / "zoorun" / "data"
FIXTURES = ROOT / "tests" / "fixtures"

WORKER_TEMPLATE = """import sys

from zoorun.engine_worker import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:], framework="{framework}", version="{version}"))
"""

# framework, version, os, arch, cpu, gpu
FIXTURE_ENGINES = [
    ("pytorch", "1.4.0", "any", "any", True, False),
    ("pytorch", "1.7.1", "any", "any", True, False),
    ("pytorch", "1.9.0", "macos", "arm64", True, False),
    ("pytorch", "2.0.1", "linux", "x86_64", True, True),
    ("onnx", "1.3.0", "any", "any", True, False),
    ("onnx", "1.10.2", "any", "any", True, False),
    ("tensorflow", "1.15.0", "any", "any", True, False),
    ("tensorflow", "2.7.0", "any", "any", True, False),
    ("tensorflow", "2.10.1", "linux", "x86_64", False, True),
    ("reference", "1.0.0", "any", "any", True, False),
    ("reference", "2.0.0", "any", "any", True, False),
]


def write_registry(root: Path, engines) -> None:
    records = []
    for fw, ver, os_name, arch, cpu, gpu in engines:
        rel = f"engines/{fw}-{ver}/worker.py"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(WORKER_TEMPLATE.format(framework=fw, version=ver))
        records.append({
            "framework": fw, "version": ver, "os": os_name, "arch": arch, "cpu": cpu, "gpu": gpu,
            "artifacts": [{"url": rel, "sha256": sha256_file(path), "filename": "worker.py"}],
        })
    (root / "registry.json").write_text(json.dumps({"engines": records}, indent=2, sort_keys=True) + "\n")


def _implicit(scale=(1, 1, 1, 1)):
    return {"reference_tensor": "raw", "scale": list(scale), "offset": [0, 0, 0, 0]}


def _ref_weights(graph_sha, version=None):
    entry = {"source": "weights.refgraph", "sha256": graph_sha}
    if version:
        entry["engine_version"] = version
    return entry


def model_table(rng):
    """id -> (descriptor without hashes, graph document, test input array)."""
    f32 = np.float32
    return {
        "identity": (
            {
                "name": "Identity",
                "inputs": [{"name": "raw", "axes": "byxc", "data_type": "float32", "shape": [1, 16, 16, 1]}],
                "outputs": [{"name": "out", "axes": "byxc", "data_type": "float32", "shape": _implicit()}],
            },
            {"inputs": ["raw"], "outputs": ["raw"], "ops": []},
            rng.normal(size=(1, 16, 16, 1)).astype(f32),
            None,
        ),
        "blur": (
            {
                "name": "Box blur",
                "inputs": [{"name": "raw", "axes": "byxc", "data_type": "float32",
                            "shape": {"min": [1, 4, 4, 1], "step": [0, 1, 1, 0]}}],
                "outputs": [{"name": "blurred", "axes": "byxc", "data_type": "float32",
                             "shape": _implicit(), "halo": [0, 1, 1, 0]}],
            },
            {"inputs": ["raw"], "outputs": [{"name": "blurred", "data_type": "float32"}],
             "ops": [{"op": "blur3", "input": "raw", "output": "blurred"}]},
            rng.uniform(0, 255, size=(1, 16, 16, 1)).astype(f32),
            "1.0.0",
        ),
        "affine": (
            {
                "name": "Channel affine",
                "inputs": [{"name": "raw", "axes": "bcyx", "data_type": "float32",
                            "shape": {"min": [1, 2, 8, 8], "step": [0, 0, 1, 1]},
                            "preprocessing": [{"name": "zero_mean_unit_variance",
                                               "kwargs": {"mode": "per_sample", "axes": "yx"}}]}],
                "outputs": [{"name": "prob", "axes": "bcyx", "data_type": "float32",
                             "shape": _implicit(), "halo": [0, 0, 0, 0],
                             "postprocessing": [{"name": "scale_linear",
                                                 "kwargs": {"gain": 2.0, "offset": -1.0}}]}],
            },
            {"inputs": ["raw"], "outputs": [{"name": "prob", "data_type": "float32"}],
             "ops": [{"op": "affine", "input": "raw", "output": "h", "a": [1.0, 2.0], "b": [0.5, -0.5]},
                     {"op": "sigmoid", "input": "h", "output": "prob"}]},
            (rng.normal(size=(1, 2, 12, 12)) * 30 + 100).astype(f32),
            "2.0.0",
        ),
        "pool": (
            {
                "name": "Average pool",
                "inputs": [{"name": "raw", "axes": "byxc", "data_type": "float32",
                            "shape": {"min": [1, 2, 2, 1], "step": [0, 2, 2, 0]}}],
                "outputs": [{"name": "pooled", "axes": "byxc", "data_type": "float64",
                             "shape": _implicit((1, 0.5, 0.5, 1)), "halo": [0, 0, 0, 0]}],
            },
            {"inputs": ["raw"], "outputs": [{"name": "pooled", "data_type": "float64"}],
             "ops": [{"op": "avgpool2", "input": "raw", "output": "pooled"}]},
            rng.normal(size=(1, 16, 20, 1)).astype(f32),
            None,
        ),
        "upsample": (
            {
                "name": "Nearest upsample",
                "inputs": [{"name": "raw", "axes": "byxc", "data_type": "float32",
                            "shape": {"min": [1, 1, 1, 1], "step": [0, 1, 1, 0]},
                            "preprocessing": [{"name": "clip", "kwargs": {"min": 0.0, "max": 1.0}}]}],
                "outputs": [{"name": "up", "axes": "byxc", "data_type": "float32",
                             "shape": _implicit((1, 2, 2, 1)), "halo": [0, 0, 0, 0],
                             "data_range": [0.0, 1.0]}],
            },
            {"inputs": ["raw"], "outputs": [{"name": "up", "data_type": "float32"}],
             "ops": [{"op": "upsample2", "input": "raw", "output": "up"}]},
            rng.uniform(-0.5, 1.5, size=(1, 9, 7, 1)).astype(f32),
            None,
        ),
        "segment": (
            {
                "name": "Threshold segmentation",
                "inputs": [{"name": "raw", "axes": "byxc", "data_type": "float32",
                            "shape": {"min": [1, 4, 4, 1], "step": [0, 1, 1, 0]},
                            "preprocessing": [{"name": "scale_range",
                                               "kwargs": {"mode": "per_sample", "axes": "yx",
                                                          "min_percentile": 1.0, "max_percentile": 99.0}}]}],
                "outputs": [{"name": "mask", "axes": "byxc", "data_type": "uint8",
                             "shape": _implicit(), "halo": [0, 1, 1, 0],
                             "postprocessing": [{"name": "binarize", "kwargs": {"threshold": 0.5}}]}],
            },
            {"inputs": ["raw"], "outputs": [{"name": "mask", "data_type": "float32"}],
             "ops": [{"op": "blur3", "input": "raw", "output": "mask"}]},
            rng.integers(0, 256, size=(1, 24, 24, 1)).astype(np.uint8),
            "1.0.0",
        ),
    }


def write_model(dest: Path, model_id: str, doc: dict, graph: dict, test_input, version) -> None:
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    graph_bytes = yaml.safe_dump(graph, sort_keys=True).encode()
    (dest / "weights.refgraph").write_bytes(graph_bytes)
    weights = {}
    if model_id == "pool":
        # a format no engine family runs; selection must skip it
        blob = b'{"format": "layers-model"}\n'
        (dest / "model.json").write_bytes(blob)
        weights["tensorflow_js"] = {"source": "model.json", "sha256": sha256_bytes(blob)}
    weights["reference_graph"] = _ref_weights(sha256_bytes(graph_bytes), version)
    rdf = {"name": doc["name"], "format_version": "0.4.10", "type": "model",
           "description": f"{doc['name']} fixture model", "weights": weights,
           "inputs": doc["inputs"], "outputs": doc["outputs"]}
    (dest / "rdf.yaml").write_text(yaml.safe_dump(rdf, sort_keys=False))

    desc = load_descriptor(dest / "rdf.yaml")
    graph_obj = load_graph(dest / "weights.refgraph")
    x = from_array("raw", desc.inputs[0].axes, test_input)
    outputs = predict(desc, lambda ts: run_graph(graph_obj, ts), [x])

    write_zrt(dest / "test_input_raw.zrt", x)
    rdf["test_inputs"] = [{"source": "test_input_raw.zrt", "sha256": sha256_file(dest / "test_input_raw.zrt")}]
    rdf["test_outputs"] = []
    for t in outputs:
        name = f"test_output_{t.name}.zrt"
        write_zrt(dest / name, t)
        rdf["test_outputs"].append({"source": name, "sha256": sha256_file(dest / name)})
    (dest / "rdf.yaml").write_text(yaml.safe_dump(rdf, sort_keys=False))
    load_descriptor(dest / "rdf.yaml")


def write_zoo(zoo: Path, models: Path, ids) -> None:
    if zoo.exists():
        shutil.rmtree(zoo)
    zoo.mkdir(parents=True)
    records = []
    for model_id, tags in ids:
        blob = build_archive(models / model_id)
        (zoo / f"{model_id}.zip").write_bytes(blob)
        desc = load_descriptor(models / model_id)
        records.append({"id": model_id, "name": desc.name, "tags": tags,
                        "download_url": f"{model_id}.zip", "sha256": sha256_bytes(blob),
                        "summary": {"weights": [w.tag for w in desc.weights]}})
    (zoo / "index.json").write_text(json.dumps({"records": records}, indent=2, sort_keys=True) + "\n")


def main():
    write_registry(PACKAGE_DATA, [e for e in FIXTURE_ENGINES if e[0] == "reference"])
    if (FIXTURES / "engines").exists():
        shutil.rmtree(FIXTURES / "engines")
    write_registry(FIXTURES, FIXTURE_ENGINES)

    rng = np.random.default_rng(20210501)
    models = FIXTURES / "models"
    for model_id, (doc, graph, x, version) in model_table(rng).items():
        write_model(models / model_id, model_id, doc, graph, x, version)
    write_zoo(FIXTURES / "zoo", models, [("blur", ["filter", "denoising"]), ("segment", ["segmentation"])])
    print(f"wrote fixtures under {FIXTURES.relative_to(ROOT)}")


if __name__ == "__main__":
    main()
