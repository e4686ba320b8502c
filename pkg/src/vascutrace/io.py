"""On-disk formats: JSON transforms, ASCII PLY clouds, binary PGM frames, JSONL.

Writers are byte-deterministic for identical inputs; floats go through
``repr`` so round trips are exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .geom import PointCloud, RigidTransform


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data) -> str:
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()[:16]


def write_json(path, data, indent: int | None = 2) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=indent, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_transform(path, T: RigidTransform, **extra) -> None:
    write_json(path, {**T.to_dict(), **extra})


def read_transform(path) -> RigidTransform:
    return RigidTransform.from_dict(read_json(path))


def write_jsonl(path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def cloud_to_json(cloud: PointCloud) -> dict:
    return {"frame": cloud.frame, "points": cloud.points.tolist()}


def cloud_from_json(data) -> PointCloud:
    if isinstance(data, list):
        return PointCloud(np.asarray(data, dtype=float))
    return PointCloud(np.asarray(data["points"], dtype=float), data.get("frame", "world"))


def write_ply(path, cloud: PointCloud, scalars: dict[str, np.ndarray] | None = None, comments=()) -> None:
    """ASCII PLY with x/y/z plus optional per-vertex scalar properties."""
    scalars = scalars or {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [cloud.points[:, k] for k in range(3)]
    names = ["x", "y", "z"]
    for name, values in scalars.items():
        values = np.asarray(values)
        if len(values) != len(cloud):
            raise ValueError(f"scalar {name!r} has {len(values)} values for {len(cloud)} points")
        cols.append(values)
        names.append(name)
    lines = ["ply", "format ascii 1.0", f"comment frame {cloud.frame}"]
    lines += [f"comment {c}" for c in comments]
    lines.append(f"element vertex {len(cloud)}")
    for name, col in zip(names, cols):
        kind = "int" if np.issubdtype(np.asarray(col).dtype, np.integer) else "double"
        lines.append(f"property {kind} {name}")
    lines.append("end_header")
    for row in zip(*cols):
        lines.append(" ".join(repr(int(v)) if isinstance(v, (np.integer, int)) else repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[PointCloud, dict[str, np.ndarray]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    frame = "world"
    props: list[tuple[str, str]] = []
    count = 0
    i = 1
    while text[i].strip() != "end_header":
        parts = text[i].split()
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["comment", "frame"] and len(parts) > 2:
            frame = parts[2]
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
        i += 1
    rows = [line.split() for line in text[i + 1 : i + 1 + count]]
    data = np.array(rows, dtype=float).reshape(count, len(props))
    names = [name for _, name in props]
    pts = data[:, [names.index(a) for a in "xyz"]]
    scalars = {}
    for k, (kind, name) in enumerate(props):
        if name not in "xyz":
            col = data[:, k]
            scalars[name] = col.astype(int) if kind in ("int", "uint", "int32", "uchar") else col
    return PointCloud(pts, frame), scalars


def write_pgm(path, image: np.ndarray, comments=()) -> None:
    """Binary (P5) 8-bit PGM."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    img = img.astype(np.uint8)
    header = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{img.shape[1]} {img.shape[0]}\n255\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM is not supported")
    pos += 1  # single whitespace after maxval
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def write_tensors(stem, tensors: dict[str, np.ndarray], **meta) -> None:
    """Flat little-endian float64 blob ``stem.bin`` with a JSON manifest ``stem.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.ravel())
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    stem.with_suffix(".bin").write_bytes(blob.tobytes())
    write_json(stem.with_suffix(".json"), {"dtype": "<f8", "tensors": entries, **meta})


def read_tensors(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    manifest = read_json(stem.with_suffix(".json"))
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=manifest.get("dtype", "<f8"))
    out = {}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = blob[e["offset"] : e["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"tensor {e['name']!r}: manifest wants {size} values, file has {chunk.size}")
        out[e["name"]] = chunk.reshape(tuple(e["shape"])).astype(float)
    return out, manifest
