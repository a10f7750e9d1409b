"""Parameter archives: flat little-endian float32 arrays plus a JSON manifest.

An archive is a zip file with one raw binary member per parameter and a
`manifest.json` that pins the format version, the layer order, each
parameter's shape, and an optional caller-supplied `extra` section (model
archives embed their configuration there).  Member metadata is fixed so
the same parameters always produce byte-identical archives.
"""

from __future__ import annotations

import io
import json
import zipfile
from typing import BinaryIO, Mapping, Union

import numpy as np

from .errors import ArchiveError
from .tensor import Tensor

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_parameters(target: Union[str, BinaryIO],
                    named_params: Mapping[str, Union[Tensor, np.ndarray]],
                    extra: dict | None = None) -> None:
    """Write parameters in iteration order; `extra` rides in the manifest."""
    entries = []
    with zipfile.ZipFile(target, "w") as zf:
        for index, (name, value) in enumerate(named_params.items()):
            array = value.data if isinstance(value, Tensor) else np.asarray(value)
            member = f"params/{index:05d}.bin"
            zf.writestr(_member(member), array.astype("<f4").tobytes())
            entries.append({"name": name, "shape": list(array.shape), "file": member})
        manifest = {
            "format_version": FORMAT_VERSION,
            "parameters": entries,
            "extra": extra or {},
        }
        zf.writestr(_member("manifest.json"),
                    json.dumps(manifest, sort_keys=True, indent=1))


def save_parameters_bytes(named_params: Mapping[str, Union[Tensor, np.ndarray]],
                          extra: dict | None = None) -> bytes:
    buffer = io.BytesIO()
    save_parameters(buffer, named_params, extra)
    return buffer.getvalue()


def load_parameters(source: Union[str, bytes, BinaryIO]) -> tuple[dict, dict]:
    """Read back `(arrays, manifest)`; arrays keep archive order and float32 dtype."""
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    try:
        with zipfile.ZipFile(source, "r") as zf:
            try:
                manifest = json.loads(zf.read("manifest.json"))
            except KeyError:
                raise ArchiveError("archive has no manifest.json")
            version = manifest.get("format_version")
            if version != FORMAT_VERSION:
                raise ArchiveError(
                    f"unsupported archive format version {version!r}")
            arrays: dict[str, np.ndarray] = {}
            for entry in manifest["parameters"]:
                raw = zf.read(entry["file"])
                shape = tuple(entry["shape"])
                expected = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
                if len(raw) != expected:
                    raise ArchiveError(
                        f"parameter {entry['name']!r}: expected {expected} bytes, "
                        f"found {len(raw)}")
                arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except zipfile.BadZipFile as exc:
        raise ArchiveError(f"not a parameter archive: {exc}") from exc
    return arrays, manifest
