"""Engine registry, version resolution and checksum-verified installation.

Installed engines live under ``<engines_dir>/<framework>-<version>-<os>-<arch>-<cpu|gpu>/``
next to a ``manifest.json`` recording each artifact's sha256, so listing and
verification need no registry access.
"""

from __future__ import annotations

import json
import logging
import platform as _platform
import re
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import NoCompatibleEngine, ParseError
from .fetch import (
    Fetcher,
    as_url,
    commit,
    download,
    install_lock,
    resolve_url,
    sha256_file,
    staging_dir,
    sweep_stale,
)
from .model_spec import ModelDescriptor

log = logging.getLogger(__name__)

FRAMEWORKS = ("tensorflow", "pytorch", "onnx", "reference")
MANIFEST = "manifest.json"
WORKER_ENTRY = "worker.py"

_VERSION = re.compile(r"^\d+\.\d+\.\d+$")
_FILENAME = re.compile(r"^[A-Za-z0-9._-]+$")


def parse_version(text: str) -> tuple[int, ...]:
    """``"1.4.2"`` -> (1, 4, 2); prefixes like ``"1.4"`` give shorter tuples."""
    parts = str(text).strip().split(".")
    if not 1 <= len(parts) <= 3 or not all(p.isdigit() for p in parts):
        raise ParseError(f"bad version {text!r}: expected major[.minor[.patch]]")
    return tuple(int(p) for p in parts)


@dataclass(frozen=True)
class Artifact:
    url: str
    sha256: str
    filename: str


@dataclass(frozen=True)
class Platform:
    os: str
    arch: str
    gpu: bool = False

    @classmethod
    def current(cls, gpu: bool = False) -> "Platform":
        os_name = {"darwin": "macos", "win32": "windows"}.get(sys.platform, sys.platform)
        if os_name.startswith("linux"):
            os_name = "linux"
        machine = _platform.machine().lower()
        arch = {"amd64": "x86_64", "aarch64": "arm64"}.get(machine, machine)
        return cls(os_name, arch, gpu)


@dataclass(frozen=True)
class EngineSpec:
    framework: str
    version: str
    os: str
    arch: str
    cpu: bool
    gpu: bool
    artifacts: tuple[Artifact, ...] = ()

    @property
    def version_tuple(self) -> tuple[int, int, int]:
        return parse_version(self.version)

    @property
    def key(self) -> tuple:
        return (self.framework, self.version, self.os, self.arch, self.cpu, self.gpu)

    @property
    def dirname(self) -> str:
        return f"{self.framework}-{self.version}-{self.os}-{self.arch}-{'gpu' if self.gpu else 'cpu'}"

    @property
    def label(self) -> str:
        return f"{self.framework} {self.version}"

    def runs_on(self, plat: Platform, device: str) -> bool:
        if self.os not in ("any", plat.os) or self.arch not in ("any", plat.arch):
            return False
        return self.gpu if device == "gpu" else self.cpu

    def to_dict(self) -> dict:
        d = asdict(self)
        d["artifacts"] = [asdict(a) for a in self.artifacts]
        return d


def spec_from_dict(data, where: str = "engine", base: str | None = None) -> EngineSpec:
    if not isinstance(data, dict):
        raise ParseError(f"{where}: expected a mapping")
    required = ("framework", "version", "os", "arch", "cpu", "gpu")
    for key in required:
        if key not in data:
            raise ParseError(f"{where}.{key}: missing required field")
    extra = set(data) - set(required) - {"artifacts"}
    if extra:
        raise ParseError(f"{where}: unknown fields {sorted(extra)}")
    if data["framework"] not in FRAMEWORKS:
        raise ParseError(f"{where}.framework: unknown framework {data['framework']!r}")
    if not isinstance(data["version"], str) or not _VERSION.match(data["version"]):
        raise ParseError(f"{where}.version: expected major.minor.patch, got {data['version']!r}")
    if not isinstance(data["cpu"], bool) or not isinstance(data["gpu"], bool):
        raise ParseError(f"{where}: cpu and gpu must be booleans")
    if not (data["cpu"] or data["gpu"]):
        raise ParseError(f"{where}: at least one of cpu/gpu must be true")
    artifacts = []
    for i, a in enumerate(data.get("artifacts") or []):
        p = f"{where}.artifacts[{i}]"
        if not isinstance(a, dict) or set(a) != {"url", "sha256", "filename"}:
            raise ParseError(f"{p}: expected {{url, sha256, filename}}")
        if not _FILENAME.match(str(a["filename"])) or a["filename"] in (MANIFEST, ".", ".."):
            raise ParseError(f"{p}.filename: invalid file name {a['filename']!r}")
        if not re.match(r"^[0-9a-f]{64}$", str(a["sha256"])):
            raise ParseError(f"{p}.sha256: expected 64 lowercase hex characters")
        artifacts.append(Artifact(resolve_url(str(a["url"]), base), a["sha256"], a["filename"]))
    names = [a.filename for a in artifacts]
    if len(set(names)) != len(names):
        raise ParseError(f"{where}.artifacts: duplicate file names")
    return EngineSpec(
        data["framework"], data["version"], str(data["os"]), str(data["arch"]),
        data["cpu"], data["gpu"], tuple(artifacts),
    )


@dataclass(frozen=True)
class EngineRegistry:
    entries: tuple[EngineSpec, ...]

    @classmethod
    def from_json(cls, text, base: str | None = None) -> "EngineRegistry":
        try:
            doc = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ParseError(f"malformed registry: {exc}") from None
        if isinstance(doc, dict) and "engines" in doc:
            doc = doc["engines"]
        if not isinstance(doc, list):
            raise ParseError("registry must be a list of engine records")
        entries = [spec_from_dict(e, f"engines[{i}]", base) for i, e in enumerate(doc)]
        seen = {}
        for i, e in enumerate(entries):
            for key in (e.key, e.dirname):
                if key in seen:
                    raise ParseError(f"engines[{i}]: duplicates engines[{seen[key]}] ({e.dirname})")
                seen[key] = i
        return cls(tuple(entries))

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.entries], indent=2, sort_keys=True)


def load_registry(location, fetcher: Fetcher | None = None) -> EngineRegistry:
    """Load a registry document from a path or URL; relative artifact URLs
    resolve against the document's own location."""
    url = as_url(location)
    return EngineRegistry.from_json((fetcher or Fetcher()).read(url), base=url)


# -- resolution ---------------------------------------------------------------

def _nearest(specs: Iterable[EngineSpec], want: tuple[int, ...], limit: int = 3) -> list[EngineSpec]:
    """Closest versions along the version ordering (components weighted 10^6, 10^3, 1)."""
    padded = tuple(want) + (0,) * (3 - len(want))

    def ordinal(v):
        return v[0] * 1_000_000 + v[1] * 1_000 + v[2]

    def distance(s):
        return (abs(ordinal(s.version_tuple) - ordinal(padded)), s.version_tuple)

    return sorted(specs, key=distance)[:limit]


def resolve_engine(
    registry: EngineRegistry | Sequence[EngineSpec],
    framework: str,
    requested: Optional[str],
    plat: Optional[Platform] = None,
) -> EngineSpec:
    """Pick the engine build for ``framework`` closest to ``requested``.

    Order: exact version; else the highest patch of the same major.minor;
    else the highest minor.patch of the same major. A ``major.minor`` prefix
    starts at the second rule, a bare major at the third, and no request at
    all picks the highest available version.
    """
    entries = registry.entries if isinstance(registry, EngineRegistry) else tuple(registry)
    plat = plat or Platform.current()
    same_fw = [e for e in entries if e.framework == framework]
    want = parse_version(requested) if requested else ()
    pools = [[e for e in same_fw if e.runs_on(plat, "cpu")]]
    if plat.gpu:
        # gpu builds first; cpu builds when no gpu build satisfies the request
        pools.insert(0, [e for e in same_fw if e.runs_on(plat, "gpu")])
    for pool in pools:
        found = _pick(pool, want)
        if found is not None:
            return found
    if not want:
        raise NoCompatibleEngine(f"no {framework} engine for {plat.os}/{plat.arch}", _nearest(same_fw, ()))
    raise NoCompatibleEngine(
        f"no {framework} engine compatible with {requested} on {plat.os}/{plat.arch}",
        _nearest(same_fw, want),
    )


def _pick(pool: Sequence[EngineSpec], want: tuple[int, ...]) -> Optional[EngineSpec]:
    if not pool:
        return None
    if not want:
        return max(pool, key=lambda e: e.version_tuple)
    if len(want) == 3:
        for e in pool:
            if e.version_tuple == want:
                return e
    if len(want) >= 2:
        tier = [e for e in pool if e.version_tuple[:2] == want[:2]]
        if tier:
            return max(tier, key=lambda e: e.version_tuple)
    tier = [e for e in pool if e.version_tuple[0] == want[0]]
    if tier:
        return max(tier, key=lambda e: e.version_tuple)
    return None


# -- installation -------------------------------------------------------------

@dataclass(frozen=True)
class InstalledEngine:
    spec: EngineSpec
    root_dir: Path
    manifest_sha256: str

    @property
    def worker_path(self) -> Path:
        return self.root_dir / WORKER_ENTRY


@dataclass(frozen=True)
class CorruptEngine:
    path: Path
    reason: str


class _Corrupt(Exception):
    pass


def _manifest_bytes(spec: EngineSpec) -> bytes:
    doc = {"engine": spec.to_dict(), "artifacts": {a.filename: a.sha256 for a in spec.artifacts}}
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def _verify_dir(path: Path) -> InstalledEngine:
    manifest = path / MANIFEST
    if not manifest.is_file():
        raise _Corrupt("missing manifest.json")
    try:
        doc = json.loads(manifest.read_text())
        spec = spec_from_dict(doc["engine"], "manifest.engine")
        hashes = doc["artifacts"]
    except (ValueError, KeyError, TypeError, ParseError) as exc:
        raise _Corrupt(f"unreadable manifest: {exc}") from None
    if spec.dirname != path.name:
        raise _Corrupt(f"directory name does not match manifest ({spec.dirname})")
    if hashes != {a.filename: a.sha256 for a in spec.artifacts}:
        raise _Corrupt("manifest artifact table is inconsistent")
    for filename, digest in sorted(hashes.items()):
        f = path / filename
        if not f.is_file():
            raise _Corrupt(f"missing artifact {filename}")
        if sha256_file(f) != digest:
            raise _Corrupt(f"artifact {filename} fails its sha256")
    return InstalledEngine(spec, path, sha256_file(manifest))


def scan_installed(engines_dir) -> tuple[list[InstalledEngine], list[CorruptEngine]]:
    root = Path(engines_dir)
    good, bad = [], []
    if not root.is_dir():
        return good, bad
    for path in sorted(root.iterdir()):
        if path.name.startswith(".") or not path.is_dir():
            continue
        try:
            good.append(_verify_dir(path))
        except _Corrupt as exc:
            bad.append(CorruptEngine(path, str(exc)))
    return good, bad


def list_installed(engines_dir) -> list[InstalledEngine]:
    """Verified engines only; corrupt directories are logged and skipped."""
    good, bad = scan_installed(engines_dir)
    for c in bad:
        log.warning("corrupt engine directory %s: %s", c.path.name, c.reason)
    return good


def install_engine(spec: EngineSpec, engines_dir, fetcher: Fetcher | None = None,
                   lock_timeout: float = 0.0) -> InstalledEngine:
    """Download, verify and atomically install ``spec``; a no-op when an intact
    copy is already present."""
    fetcher = fetcher or Fetcher()
    root = Path(engines_dir)
    final = root / spec.dirname
    if final.is_dir():
        try:
            return _verify_dir(final)
        except _Corrupt as exc:
            log.warning("reinstalling corrupt engine %s: %s", spec.dirname, exc)
    with install_lock(root, spec.dirname, lock_timeout):
        if final.is_dir():
            try:
                return _verify_dir(final)
            except _Corrupt:
                pass
        sweep_stale(root, spec.dirname)
        with staging_dir(root, spec.dirname) as stage:
            for a in spec.artifacts:
                download(fetcher, a.url, stage / a.filename, a.sha256)
            (stage / MANIFEST).write_bytes(_manifest_bytes(spec))
            manifest_sha = sha256_file(stage / MANIFEST)
            commit(stage, final)
    log.info("installed %s", spec.dirname)
    return InstalledEngine(spec, final, manifest_sha)


def engine_for_model(
    descriptor: ModelDescriptor,
    installed: Sequence[InstalledEngine],
    registry: EngineRegistry,
    plat: Optional[Platform] = None,
) -> tuple[str, EngineSpec, bool]:
    """Choose (weights tag, engine, install_needed).

    A weights format whose engine is already installed wins (first in
    descriptor order); otherwise the first format the registry can resolve.
    """
    plat = plat or Platform.current()
    local = [ie.spec for ie in installed]
    for w in descriptor.weights:
        if w.framework is None:
            continue
        try:
            return w.tag, resolve_engine(local, w.framework, w.engine_version, plat), False
        except NoCompatibleEngine:
            pass
    nearest = []
    for w in descriptor.weights:
        if w.framework is None:
            continue
        try:
            return w.tag, resolve_engine(registry, w.framework, w.engine_version, plat), True
        except NoCompatibleEngine as exc:
            nearest.extend(exc.candidates)
    tags = ", ".join(w.tag for w in descriptor.weights)
    raise NoCompatibleEngine(f"no engine can run any weights format of {descriptor.name!r} ({tags})", nearest[:3])
