"""Model collection index and verified model downloads.

Index document (JSON)::

    {"records": [{"id": "blur", "name": "Box blur", "tags": ["denoising"],
                  "download_url": "blur.zip", "sha256": "...",
                  "summary": {...}}]}

Relative download URLs resolve against the index location. A downloaded
model is unpacked to ``<models_dir>/<id>/`` through a staging directory and
only committed once its archive digest, descriptor and every referenced
file check out.
"""

from __future__ import annotations

import io
import json
import logging
import re
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Optional

from .errors import ChecksumMismatch, ParseError, UnpackError
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
from .model_spec import DESCRIPTOR_NAME, ModelDescriptor, load_descriptor

log = logging.getLogger(__name__)

ARCHIVE_DIGEST = ".archive.sha256"
_MODEL_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


@dataclass(frozen=True)
class ModelRecord:
    id: str
    name: str
    tags: tuple[str, ...]
    download_url: str
    sha256: str
    summary: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class CollectionIndex:
    records: tuple[ModelRecord, ...]
    source: Optional[str] = None

    def get(self, model_id: str) -> ModelRecord:
        for r in self.records:
            if r.id == model_id:
                return r
        raise KeyError(model_id)


def parse_index(text, base: Optional[str] = None) -> CollectionIndex:
    try:
        doc = json.loads(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed index: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("records")
    if not isinstance(doc, list):
        raise ParseError("index must hold a list of records")
    records, seen = [], set()
    for i, r in enumerate(doc):
        where = f"records[{i}]"
        if not isinstance(r, dict):
            raise ParseError(f"{where}: expected a mapping")
        for key in ("id", "name", "download_url", "sha256"):
            if not isinstance(r.get(key), str):
                raise ParseError(f"{where}.{key}: missing or not a string")
        if not _MODEL_ID.match(r["id"]):
            raise ParseError(f"{where}.id: invalid model id {r['id']!r}")
        if r["id"] in seen:
            raise ParseError(f"{where}.id: duplicate model id {r['id']!r}")
        if not re.match(r"^[0-9a-f]{64}$", r["sha256"]):
            raise ParseError(f"{where}.sha256: expected 64 lowercase hex characters")
        tags = r.get("tags") or []
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise ParseError(f"{where}.tags: expected a list of strings")
        seen.add(r["id"])
        records.append(ModelRecord(
            r["id"], r["name"], tuple(tags), resolve_url(r["download_url"], base), r["sha256"],
            dict(r.get("summary") or {}),
        ))
    return CollectionIndex(tuple(records), base)


def load_index(source, fetcher: Optional[Fetcher] = None) -> CollectionIndex:
    url = as_url(source)
    return parse_index((fetcher or Fetcher()).read(url), base=url)


def search(index: CollectionIndex, query: str) -> list[ModelRecord]:
    """Case-insensitive substring match over names and tags, ordered by id."""
    q = query.lower()
    hits = [r for r in index.records if q in r.name.lower() or any(q in t.lower() for t in r.tags)]
    return sorted(hits, key=lambda r: r.id)


def _verify_model_dir(path: Path) -> ModelDescriptor:
    """Parse the descriptor and check every file it references."""
    if not (path / DESCRIPTOR_NAME).is_file():
        raise UnpackError(f"model archive has no {DESCRIPTOR_NAME}")
    desc = load_descriptor(path / DESCRIPTOR_NAME)
    refs = [(f"weights {w.tag}", w.source, w.sha256) for w in desc.weights]
    refs += [("test input", f.source, f.sha256) for f in desc.test_inputs]
    refs += [("test output", f.source, f.sha256) for f in desc.test_outputs]
    root = path.resolve()
    for what, source, digest in refs:
        f = (path / source).resolve()
        if root not in f.parents:
            raise UnpackError(f"{what} path {source!r} escapes the model directory")
        if not f.is_file():
            raise UnpackError(f"{what} file {source!r} is missing")
        actual = sha256_file(f)
        if actual != digest:
            raise ChecksumMismatch(f"{what} {source}", digest, actual)
    return desc


def is_intact(model_dir, record: Optional[ModelRecord] = None) -> bool:
    model_dir = Path(model_dir)
    if not model_dir.is_dir():
        return False
    if record is not None:
        marker = model_dir / ARCHIVE_DIGEST
        if not marker.is_file() or marker.read_text().strip() != record.sha256:
            return False
    try:
        _verify_model_dir(model_dir)
    except Exception:
        return False
    return True


def _unpack(archive: Path, dest: Path) -> None:
    try:
        zf = zipfile.ZipFile(archive)
    except (zipfile.BadZipFile, OSError) as exc:
        raise UnpackError(f"not a zip archive: {exc}") from None
    with zf:
        names = [n for n in zf.namelist() if not n.endswith("/")]
        if not names:
            raise UnpackError("archive is empty")
        parts = [PurePosixPath(n).parts for n in names]
        for n, p in zip(names, parts):
            if PurePosixPath(n).is_absolute() or ".." in p or (p and ":" in p[0]):
                raise UnpackError(f"unsafe path in archive: {n!r}")
        # a single top-level directory is stripped
        strip = 0
        tops = {p[0] for p in parts}
        if len(tops) == 1 and all(len(p) > 1 for p in parts):
            strip = 1
        for n, p in zip(names, parts):
            target = dest.joinpath(*p[strip:])
            target.parent.mkdir(parents=True, exist_ok=True)
            try:
                with zf.open(n) as src:
                    target.write_bytes(src.read())
            except (zipfile.BadZipFile, OSError, EOFError, zlib.error) as exc:
                raise UnpackError(f"cannot extract {n!r}: {exc}") from None


def download_model(record: ModelRecord, dest_dir, fetcher: Optional[Fetcher] = None,
                   lock_timeout: float = 0.0) -> Path:
    """Fetch, verify and unpack ``record`` into ``dest_dir/<id>``; a no-op if
    an intact copy is already there."""
    fetcher = fetcher or Fetcher()
    root = Path(dest_dir)
    final = root / record.id
    if is_intact(final, record):
        return final
    with install_lock(root, record.id, lock_timeout):
        if is_intact(final, record):
            return final
        sweep_stale(root, record.id)
        with staging_dir(root, record.id) as stage:
            archive = stage / "archive.zip"
            download(fetcher, record.download_url, archive, record.sha256)
            model = stage / "model"
            model.mkdir()
            _unpack(archive, model)
            _verify_model_dir(model)
            (model / ARCHIVE_DIGEST).write_text(record.sha256 + "\n")
            commit(model, final)
    log.info("downloaded %s", record.id)
    return final


def build_archive(model_dir, files: Optional[list] = None) -> bytes:
    """Zip a model directory reproducibly (fixed timestamps, sorted entries)."""
    model_dir = Path(model_dir)
    files = sorted(files or [p.relative_to(model_dir).as_posix() for p in model_dir.rglob("*")
                             if p.is_file() and not p.name.startswith(".")])
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in files:
            info = zipfile.ZipInfo(name, date_time=(2020, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, (model_dir / name).read_bytes())
    return buf.getvalue()
