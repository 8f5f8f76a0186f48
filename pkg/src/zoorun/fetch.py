"""URL retrieval and crash-safe directory installation.

Both engine installs and model downloads follow the same discipline:
everything is written under a hidden staging directory next to the final
location, verified there, and only then renamed into place. A crash at any
point leaves either no final directory or a complete one.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import os
import shutil
import tempfile
import urllib.parse
import urllib.request
from pathlib import Path
from typing import Iterator

from filelock import FileLock, Timeout

from .errors import AlreadyInstalling, ChecksumMismatch, FetchError

log = logging.getLogger(__name__)

CHUNK = 1 << 16
STAGING_PREFIX = ".staging-"


class Fetcher:
    """Retrieves ``file://`` and ``https://`` URLs as a stream of byte chunks."""

    timeout = 60.0

    def get(self, url: str) -> Iterator[bytes]:
        parts = urllib.parse.urlparse(url)
        if parts.scheme == "file":
            path = Path(urllib.request.url2pathname(parts.path))
            try:
                fh = open(path, "rb")
            except OSError as exc:
                raise FetchError(f"cannot open {url}: {exc}") from None
            with fh:
                while chunk := fh.read(CHUNK):
                    yield chunk
        elif parts.scheme in ("https", "http"):
            try:
                with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                    while chunk := resp.read(CHUNK):
                        yield chunk
            except OSError as exc:
                raise FetchError(f"cannot fetch {url}: {exc}") from None
        else:
            raise FetchError(f"unsupported URL scheme in {url!r}")

    def read(self, url: str) -> bytes:
        return b"".join(self.get(url))


def resolve_url(url: str, base: str | None) -> str:
    """Resolve a relative URL or bare path against ``base`` (a URL or directory path)."""
    if urllib.parse.urlparse(url).scheme:
        return url
    if base is None:
        return Path(url).resolve().as_uri()
    if not urllib.parse.urlparse(base).scheme:
        is_dir = base.endswith(("/", os.sep)) or Path(base).is_dir()
        base = Path(base).resolve().as_uri() + ("/" if is_dir else "")
    return urllib.parse.urljoin(base, url)


def as_url(location) -> str:
    """Turn a filesystem path or URL string into a URL."""
    text = str(location)
    if urllib.parse.urlparse(text).scheme in ("file", "http", "https"):
        return text
    return Path(text).resolve().as_uri()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(CHUNK):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def download(fetcher: Fetcher, url: str, dest: Path, sha256: str | None = None) -> str:
    """Stream ``url`` into ``dest``; verify the digest when given. Returns the digest."""
    h = hashlib.sha256()
    try:
        with open(dest, "wb") as fh:
            for chunk in fetcher.get(url):
                h.update(chunk)
                fh.write(chunk)
    except FetchError:
        raise
    except OSError as exc:
        raise FetchError(f"writing {dest.name}: {exc}") from None
    digest = h.hexdigest()
    if sha256 is not None and digest != sha256:
        raise ChecksumMismatch(url, sha256, digest)
    return digest


@contextlib.contextmanager
def install_lock(root: Path, name: str, timeout: float = 0.0):
    """Advisory per-item lock; raises AlreadyInstalling if held elsewhere."""
    root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(root / f".{name}.lock"), timeout=timeout)
    try:
        lock.acquire()
    except Timeout:
        raise AlreadyInstalling(f"{name} is being installed by another process") from None
    try:
        yield
    finally:
        lock.release()


@contextlib.contextmanager
def staging_dir(root: Path, name: str):
    """Yield a fresh staging directory under ``root``; removed unless the
    caller has already renamed it away."""
    root.mkdir(parents=True, exist_ok=True)
    path = Path(tempfile.mkdtemp(prefix=f"{STAGING_PREFIX}{name}~", dir=root))
    try:
        yield path
    finally:
        if path.exists():
            shutil.rmtree(path, ignore_errors=True)


def commit(staged: Path, final: Path) -> None:
    """Atomically move a verified staging directory into place."""
    if final.exists():
        trash = final.with_name(f".trash-{final.name}-{os.getpid()}")
        shutil.rmtree(trash, ignore_errors=True)
        os.rename(final, trash)
        shutil.rmtree(trash, ignore_errors=True)
    os.rename(staged, final)


def sweep_stale(root: Path, name: str) -> None:
    """Remove staging leftovers of a previous crashed attempt (call under lock)."""
    if not root.is_dir():
        return
    for p in root.glob(f"{STAGING_PREFIX}{name}~*"):
        log.debug("removing stale staging directory %s", p)
        shutil.rmtree(p, ignore_errors=True)
