"""Named-tensor container used for datasets, checkpoints and bases.

Layout (all integers little-endian)::

    b"L3DT"                   4-byte magic
    uint32  version           currently 1; readers reject anything else
    uint64  header_length     bytes of the JSON header that follows
    header                    UTF-8 JSON, sorted keys, no whitespace:
                              {"kind": str, "meta": {...},
                               "arrays": [{"name", "shape", "offset"}, ...]}
    payload                   row-major float64 arrays, little-endian,
                              at byte ``offset`` from the payload start

The same inputs always produce the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"L3DT"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_container(path, kind, meta, arrays):
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = dumps_json({"kind": kind, "meta": meta, "arrays": entries}).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    return path


def read_container(path, kind=None):
    """Return ``(meta, arrays)``; ``kind`` if given must match the stored kind."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated container")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not an L3DT container")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    payload = memoryview(raw)[start + hlen :]
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(payload):
            raise FormatError(f"{path}: array {e['name']!r} runs past the end of the file")
        arrays[e["name"]] = np.frombuffer(payload[e["offset"] : end], dtype="<f8").astype(np.float64).reshape(
            e["shape"]
        )
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# typed wrappers


def save_params(path, spec, params, meta=None):
    m = {"spec": spec.to_dict(), "names": list(params)}
    m.update(meta or {})
    return write_container(path, "params", m, params)


def load_params(path):
    from .models import MlpSpec
    from .numkit import ParamSet

    meta, arrays = read_container(path, "params")
    spec = MlpSpec.from_dict(meta["spec"])
    params = ParamSet((n, arrays[n]) for n in meta["names"])
    return spec, params, meta


def save_basis(path, basis, meta=None):
    m, arrays = basis.to_record()
    m = dict(m)
    m.update(meta or {})
    return write_container(path, "basis", m, arrays)


def load_basis(path):
    from .decomposition import SubnetworkBasis

    meta, arrays = read_container(path, "basis")
    return SubnetworkBasis.from_record(meta, arrays), meta


def save_dataset(path, task, data, meta=None):
    m = {
        "task": {
            "kind": task.kind,
            "n_in": task.n_in,
            "n_out": task.n_out,
            "sparsity": task.sparsity,
            "lo": task.lo,
            "hi": task.hi,
            "group_size": task.group_size,
        }
    }
    m.update(meta or {})
    arrays = {"X": data.X, "Y": data.Y}
    if task.A is not None:
        arrays["A"] = task.A
    return write_container(path, "dataset", m, arrays)


def load_dataset(path):
    from .models import Dataset, ToyTaskSpec

    meta, arrays = read_container(path, "dataset")
    task = ToyTaskSpec(A=arrays.get("A"), **meta["task"])
    return task, Dataset(arrays["X"], arrays["Y"]), meta
