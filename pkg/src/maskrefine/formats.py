"""On-disk formats: raw f64 tensors with JSON headers, P5 PGM masks,
checkpoints and JSON-lines logs."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

LE_F64 = np.dtype("<f8")


def _stem(path: str | Path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".f64", ".json") else path


def save_tensor(path: str | Path, array: np.ndarray, name: str | None = None) -> Path:
    """Write ``<stem>.f64`` (little-endian payload) and ``<stem>.json`` (header)."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype=LE_F64)
    payload = stem.with_name(stem.name + ".f64")
    payload.write_bytes(arr.tobytes())
    header = {"name": name or stem.name, "shape": list(arr.shape), "dtype": "f64"}
    stem.with_name(stem.name + ".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    return payload


def load_tensor(path: str | Path) -> np.ndarray:
    stem = _stem(path)
    header = json.loads(stem.with_name(stem.name + ".json").read_text())
    if header.get("dtype") != "f64":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    raw = stem.with_name(stem.name + ".f64").read_bytes()
    shape = tuple(header["shape"])
    if len(raw) != 8 * int(np.prod(shape)):
        raise ValueError(f"payload size {len(raw)} does not match shape {shape}")
    return np.frombuffer(raw, dtype=LE_F64).reshape(shape).astype(np.float64)


def write_pgm(path: str | Path, image: np.ndarray, binary: bool = True) -> Path:
    """8-bit P5 PGM. With ``binary`` nonzero pixels are written as 255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    data = np.where(img != 0, 255, 0).astype(np.uint8) if binary else np.clip(np.round(img), 0, 255).astype(np.uint8)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Raw uint8 pixels of a P5 PGM with maxval 255."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def read_mask(path: str | Path) -> np.ndarray:
    return (read_pgm(path) > 127).astype(np.uint8)


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    """JSON manifest ``<stem>.json`` plus concatenated f64 payloads ``<stem>.f64``."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype=LE_F64).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f64", "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    payload_path = stem.with_name(stem.name + ".f64")
    payload_path.write_bytes(payload)
    manifest = {
        "format": "maskrefine-checkpoint-1",
        "payload": payload_path.name,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": entries,
        **dict(meta or {}),
    }
    manifest_path = stem.with_name(stem.name + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    manifest = json.loads(stem.with_name(stem.name + ".json").read_text())
    payload = (stem.parent / manifest["payload"]).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{stem}: payload hash mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype=LE_F64).reshape(e["shape"]).astype(np.float64)
    return tensors, manifest


def append_jsonl(path: str | Path, record: Mapping) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
