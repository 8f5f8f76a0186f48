from __future__ import annotations

import shutil
from pathlib import Path

import pytest
import yaml

from zoorun.engines import Platform, install_engine, load_registry, resolve_engine
from zoorun.fetch import sha256_bytes

FIXTURES = Path(__file__).parent / "fixtures"
MODELS = FIXTURES / "models"
LINUX = Platform("linux", "x86_64")


@pytest.fixture(scope="session")
def registry():
    return load_registry(FIXTURES / "registry.json")


@pytest.fixture(scope="session")
def shared_engines(tmp_path_factory, registry):
    """An engines dir holding reference 1.0.0 and 2.0.0, installed once."""
    root = tmp_path_factory.mktemp("engines")
    for ver in ("1.0.0", "2.0.0"):
        install_engine(resolve_engine(registry, "reference", ver, LINUX), root)
    return root


@pytest.fixture
def ref_engine(shared_engines, registry):
    from zoorun.engines import list_installed
    return next(ie for ie in list_installed(shared_engines) if ie.spec.version == "1.0.0")


def copy_model(name: str, dest: Path) -> Path:
    target = dest / name
    shutil.copytree(MODELS / name, target)
    return target


def write_model(dest: Path, graph: dict, inputs: list, outputs: list, name="scratch",
                weights_tag="reference_graph", extra_weights=None, version=None) -> Path:
    """A throwaway model directory around a reference graph document."""
    dest.mkdir(parents=True, exist_ok=True)
    blob = yaml.safe_dump(graph).encode()
    (dest / "weights.refgraph").write_bytes(blob)
    entry = {"source": "weights.refgraph", "sha256": sha256_bytes(blob)}
    if version:
        entry["engine_version"] = version
    weights = dict(extra_weights or {})
    weights[weights_tag] = entry
    doc = {"name": name, "format_version": "0.4.10", "weights": weights,
           "inputs": inputs, "outputs": outputs}
    (dest / "rdf.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))
    return dest


def vector_io(in_name="x", out_name="y", dtype="float32"):
    """Single 1-D input of any length and a same-size output."""
    return (
        [{"name": in_name, "axes": "x", "data_type": "float32", "shape": {"min": [1], "step": [1]}}],
        [{"name": out_name, "axes": "x", "data_type": dtype,
          "shape": {"reference_tensor": in_name, "scale": [1], "offset": [0]}}],
    )
