"""Command line entry point.

    zoorun engines list | install FW VER | resolve FW VER
    zoorun models search Q | download ID | info PATH-OR-ID
    zoorun run MODEL INPUT... [--tile y=256,x=256] [--no-tiling] [--output DIR]
    zoorun test-model MODEL [--figures DIR]

Exit codes: 0 ok, 1 usage, 2 data/validation, 3 engine/worker, 4 integrity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import engines as eng
from .errors import UsageError, ZoorunError
from .model_spec import DESCRIPTOR_NAME, Explicit, Implicit, Parameterized, load_descriptor
from .ndtensor import SPATIAL_AXES, read_zrt, write_zrt
from .runner import Model, test_model
from .zoo import download_model, is_intact, load_index, search

DEFAULT_HOME = Path.home() / ".zoorun"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _rel(path) -> str:
    path = Path(path)
    try:
        return os.path.relpath(path)
    except ValueError:
        return str(path)


def default_registry() -> str:
    return str(resources.files("zoorun") / "data" / "registry.json")


class Config:
    def __init__(self, args):
        env = os.environ
        self.registry = getattr(args, "registry", None) or env.get("ZOORUN_REGISTRY") or default_registry()
        self.engines_dir = Path(getattr(args, "engines_dir", None) or env.get("ZOORUN_ENGINES")
                                or DEFAULT_HOME / "engines")
        self.models_dir = Path(getattr(args, "models_dir", None) or env.get("ZOORUN_MODELS")
                               or DEFAULT_HOME / "models")
        self.index = getattr(args, "index", None) or env.get("ZOORUN_INDEX")
        self.json = bool(getattr(args, "json", False))

    def load_registry(self):
        return eng.load_registry(self.registry)

    def load_index(self):
        if not self.index:
            raise UsageError("no model index configured (use --index or ZOORUN_INDEX)")
        return load_index(self.index)


def _emit(cfg: Config, doc, lines: Sequence[str]):
    if cfg.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


# -- engines -------------------------------------------------------------------

def _engine_row(spec) -> str:
    return "\t".join((spec.framework, spec.version, spec.os, spec.arch, "gpu" if spec.gpu else "cpu"))


def cmd_engines(cfg: Config, args) -> int:
    if args.action == "list":
        installed = eng.list_installed(cfg.engines_dir)
        installed.sort(key=lambda ie: (ie.spec.framework, ie.spec.version_tuple, ie.spec.dirname))
        _emit(cfg, [dict(ie.spec.to_dict(), path=_rel(ie.root_dir)) for ie in installed],
              [_engine_row(ie.spec) for ie in installed])
        return 0
    if args.framework is None or args.version is None:
        raise UsageError(f"engines {args.action} needs FRAMEWORK and VERSION")
    spec = eng.resolve_engine(cfg.load_registry(), args.framework, args.version)
    if args.action == "resolve":
        _emit(cfg, spec.to_dict(), [_engine_row(spec)])
        return 0
    target = cfg.engines_dir / spec.dirname
    fresh = not any(ie.spec.key == spec.key for ie in eng.list_installed(cfg.engines_dir))
    installed = eng.install_engine(spec, cfg.engines_dir)
    status = "installed" if fresh else "cached"
    _emit(cfg, {"status": status, "engine": spec.to_dict(), "path": _rel(installed.root_dir)},
          [f"{status}\t{_engine_row(spec)}\t{_rel(target)}"])
    return 0


# -- models --------------------------------------------------------------------

def _shape_text(rule) -> str:
    if isinstance(rule, Explicit):
        return "explicit " + "x".join(map(str, rule.sizes))
    if isinstance(rule, Parameterized):
        return f"min {list(rule.min)} step {list(rule.step)}"
    if isinstance(rule, Implicit):
        scale = [str(s) for s in rule.scale]
        return f"ref {rule.reference_input} scale [{', '.join(scale)}] offset {list(rule.offset)}"
    return str(rule)


def _steps_text(steps) -> str:
    if not steps:
        return "none"
    parts = []
    for s in steps:
        kw = ", ".join(f"{k}={v}" for k, v in sorted(s.kwargs.items()))
        parts.append(f"{s.name}({kw})" if kw else s.name)
    return " -> ".join(parts)


def _tensor_doc(t) -> dict:
    return {
        "name": t.name,
        "axes": t.axes,
        "shape": _shape_text(t.shape),
        "data_type": t.data_type.long_name,
        "halo": list(t.halo) if t.halo is not None else None,
        "processing": [{"name": s.name, "kwargs": s.kwargs} for s in t.processing],
    }


def describe(desc) -> tuple[dict, list[str]]:
    doc = {
        "name": desc.name,
        "format_version": desc.format_version,
        "weights": [{"format": w.tag, "engine_version": w.engine_version} for w in desc.weights],
        "inputs": [_tensor_doc(t) for t in desc.inputs],
        "outputs": [_tensor_doc(t) for t in desc.outputs],
        "test_tensors": len(desc.test_inputs) + len(desc.test_outputs),
    }
    lines = [f"name\t{desc.name}", f"format_version\t{desc.format_version}"]
    for w in desc.weights:
        lines.append(f"weights\t{w.tag}\t{w.engine_version or '-'}")
    for kind, group in (("input", desc.inputs), ("output", desc.outputs)):
        for t in group:
            halo = ",".join(map(str, t.halo)) if t.halo is not None else "-"
            lines.append(f"{kind}\t{t.name}\t{t.axes}\t{t.data_type.long_name}\t{_shape_text(t.shape)}\thalo {halo}")
            step_kind = "preprocessing" if kind == "input" else "postprocessing"
            lines.append(f"{step_kind}\t{t.name}\t{_steps_text(t.processing)}")
    return doc, lines


def resolve_model(cfg: Config, ref: str, fetch: bool = True) -> Path:
    """A model directory from a path, an already downloaded id, or an index id."""
    path = Path(ref)
    if path.is_file() and path.name == DESCRIPTOR_NAME:
        return path.parent
    if path.is_dir():
        return path
    local = cfg.models_dir / ref
    if (local / DESCRIPTOR_NAME).is_file():
        return local
    if fetch and cfg.index:
        index = cfg.load_index()
        try:
            record = index.get(ref)
        except KeyError:
            raise UsageError(f"no model {ref!r} in the index") from None
        return download_model(record, cfg.models_dir)
    raise UsageError(f"no model directory or downloaded model named {ref!r}")


def cmd_models(cfg: Config, args) -> int:
    if args.action == "search":
        hits = search(cfg.load_index(), args.target or "")
        _emit(cfg, [{"id": r.id, "name": r.name, "tags": list(r.tags)} for r in hits],
              [f"{r.id}\t{r.name}\t{','.join(r.tags)}" for r in hits])
        return 0
    if args.target is None:
        raise UsageError(f"models {args.action} needs an argument")
    if args.action == "download":
        index = cfg.load_index()
        try:
            record = index.get(args.target)
        except KeyError:
            raise UsageError(f"no model {args.target!r} in the index") from None
        cached = is_intact(cfg.models_dir / record.id, record)
        path = download_model(record, cfg.models_dir)
        status = "cached" if cached else "downloaded"
        _emit(cfg, {"status": status, "id": record.id, "path": _rel(path)},
              [f"{status}\t{record.id}\t{_rel(path)}"])
        return 0
    model_dir = resolve_model(cfg, args.target, fetch=False)
    doc, lines = describe(load_descriptor(model_dir / DESCRIPTOR_NAME))
    _emit(cfg, doc, lines)
    return 0


# -- run / test-model ----------------------------------------------------------

def parse_tile(text: Optional[str]) -> Optional[dict]:
    """``y=10,x=10`` or positional ``10,10`` (over z, y, x from the right)."""
    if not text:
        return None
    items = [s.strip() for s in text.split(",") if s.strip()]
    try:
        if all("=" in s for s in items):
            out = {}
            for s in items:
                k, v = s.split("=", 1)
                k = k.strip()
                if k not in SPATIAL_AXES:
                    raise UsageError(f"--tile: {k!r} is not a spatial axis")
                out[k] = int(v)
        elif not any("=" in s for s in items) and len(items) <= 3:
            out = dict(zip(SPATIAL_AXES[3 - len(items):], (int(s) for s in items)))
        else:
            raise UsageError(f"--tile: cannot parse {text!r}")
    except ValueError:
        raise UsageError(f"--tile: cannot parse {text!r}") from None
    if any(v < 1 for v in out.values()):
        raise UsageError("--tile: extents must be positive")
    return out


def _open_model(cfg: Config, args) -> Model:
    model_dir = resolve_model(cfg, args.model)
    return Model.load(model_dir, cfg.engines_dir, cfg.load_registry(),
                      auto_install=not getattr(args, "no_install", False))


def cmd_run(cfg: Config, args) -> int:
    if args.tile and args.no_tiling:
        raise UsageError("--tile and --no-tiling are exclusive")
    tile = parse_tile(args.tile)
    missing = [p for p in args.inputs if not Path(p).is_file()]
    if missing:
        raise UsageError(f"input file not found: {missing[0]}")
    inputs = [read_zrt(p) for p in args.inputs]
    out_dir = Path(args.output)
    with _open_model(cfg, args) as model:
        outputs = model.predict(inputs, tile=tile, tiling=not args.no_tiling)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in outputs:
        path = out_dir / f"{t.name}.zrt"
        write_zrt(path, t)
        written.append((t, path))
    _emit(cfg, [{"name": t.name, "axes": t.axes, "shape": list(t.shape), "dtype": t.dtype.long_name,
                 "path": _rel(p)} for t, p in written],
          [f"{t.name}\t{t.axes}\t{'x'.join(map(str, t.shape))}\t{t.dtype.long_name}\t{_rel(p)}"
           for t, p in written])
    return 0


def cmd_test_model(cfg: Config, args) -> int:
    from .report import verdict_rows, write_report, HEADER

    if args.tile and args.no_tiling:
        raise UsageError("--tile and --no-tiling are exclusive")
    tile = parse_tile(args.tile)
    with _open_model(cfg, args) as model:
        verdicts = test_model(model, tile=tile, tiling=not args.no_tiling)
    rows = verdict_rows(verdicts)
    figures = write_report(verdicts, args.figures) if args.figures else []
    ok = all(v.passed for v in verdicts)
    doc = {
        "passed": ok,
        "outputs": [dict(zip(HEADER, r)) for r in rows],
        "figures": [_rel(p) for p in figures],
    }
    lines = ["\t".join(HEADER)] + ["\t".join(r) for r in rows]
    lines += [f"report\t{_rel(p)}" for p in figures]
    lines.append("PASS" if ok else "FAIL")
    _emit(cfg, doc, lines)
    return 0 if ok else 2


# -- wiring --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--registry", default=argparse.SUPPRESS, help="engine registry (path or URL)")
    common.add_argument("--engines-dir", default=argparse.SUPPRESS, help="where engines are installed")
    common.add_argument("--models-dir", default=argparse.SUPPRESS, help="where models are downloaded")
    common.add_argument("--index", default=argparse.SUPPRESS, help="model collection index (path or URL)")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = _Parser(prog="zoorun", parents=[common], description="Run and verify zoo models in isolated engines.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("engines", parents=[common], help="list, install or resolve engines")
    e.add_argument("action", choices=("list", "install", "resolve"))
    e.add_argument("framework", nargs="?")
    e.add_argument("version", nargs="?")
    e.set_defaults(func=cmd_engines)

    m = sub.add_parser("models", parents=[common], help="search, download or describe models")
    m.add_argument("action", choices=("search", "download", "info"))
    m.add_argument("target", nargs="?")
    m.set_defaults(func=cmd_models)

    r = sub.add_parser("run", parents=[common], help="run a model on ZRT1 inputs")
    r.add_argument("model", help="model directory, descriptor path or model id")
    r.add_argument("inputs", nargs="+", help="input tensors (.zrt)")
    r.add_argument("--tile", help="tile extents, e.g. y=256,x=256")
    r.add_argument("--no-tiling", action="store_true")
    r.add_argument("--output", "-o", default=".", help="output directory")
    r.add_argument("--no-install", action="store_true", help="never install missing engines")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("test-model", parents=[common], help="verify a model against its test tensors")
    t.add_argument("model")
    t.add_argument("--tile")
    t.add_argument("--no-tiling", action="store_true")
    t.add_argument("--no-install", action="store_true")
    t.add_argument("--figures", help="write report.tsv and comparison PNGs here")
    t.set_defaults(func=cmd_test_model)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * getattr(args, "verbose", 0)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    cfg = Config(args)
    try:
        return args.func(cfg, args)
    except ZoorunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
