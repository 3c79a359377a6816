"""Run manifests: the resolved parameters and artifact digests of one run.

A manifest holds everything needed to re-execute a run — subcommand, the
fully-resolved invocation (config defaults applied, flags folded in), and
the sha256 of every input and output — so "did this reproduce?" is a byte
comparison, not a judgement call. Output paths are stored relative to the
manifest's own directory, so a moved artifact folder still verifies.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

FORMAT_NAME = "flatreg-manifest"
FORMAT_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    invocation: dict
    seeds: dict
    inputs: dict
    outputs: dict
    wall_clock: float
    version: str
    format: str = FORMAT_NAME
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.format != FORMAT_NAME:
            raise ManifestError(f"format must be {FORMAT_NAME!r}, got {self.format!r}")
        if self.format_version != FORMAT_VERSION:
            raise ManifestError(
                f"unsupported manifest version {self.format_version}"
            )
        if not self.subcommand:
            raise ManifestError("subcommand must be non-empty")
        if self.wall_clock < 0:
            raise ManifestError(f"wall_clock must be >= 0, got {self.wall_clock}")

    def to_dict(self) -> dict:
        return asdict(self)


def file_sha256(path: str, chunk: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def digest_map(paths, base_dir: str | None = None) -> dict:
    """path → sha256 for each file; keys relative to base_dir when given."""
    out = {}
    for path in paths:
        key = os.path.relpath(path, base_dir) if base_dir else path
        out[key] = file_sha256(path)
    return out


def write_manifest(manifest: RunManifest, path: str) -> None:
    """Atomic write (tmp + rename), stable key order."""
    blob = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


_REQUIRED = (
    "subcommand",
    "invocation",
    "seeds",
    "inputs",
    "outputs",
    "wall_clock",
    "version",
    "format",
    "format_version",
)


def load_manifest(path: str) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(blob, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    unknown = set(blob) - set(_REQUIRED)
    if unknown:
        raise ManifestError(f"{path}: unknown manifest keys {sorted(unknown)}")
    missing = set(_REQUIRED) - set(blob)
    if missing:
        raise ManifestError(f"{path}: missing manifest keys {sorted(missing)}")
    return RunManifest(**blob)


def verify_outputs(manifest: RunManifest, base_dir: str) -> dict:
    """Recompute output digests; returns relpath → (recorded, actual) mismatches."""
    mismatches = {}
    for rel, recorded in manifest.outputs.items():
        full = os.path.join(base_dir, rel)
        actual = file_sha256(full) if os.path.exists(full) else None
        if actual != recorded:
            mismatches[rel] = (recorded, actual)
    return mismatches
