"""Binary file formats.

Dataset (``CAMPDS1``)::

    b"CAMPDS1\\n" | u32le header_len | UTF-8 JSON header | payload

The payload holds, per segment in index order, float32 LE states
``(h+1) x state_dim``, actions ``h x action_dim`` and rewards ``h``; then per
pair four uint32 LE values ``(first, second, kind, target_task)`` followed by
a float32 LE label. Per-segment task ids live in the header.

Checkpoint (``CAMPCKPT``)::

    b"CAMPCKPT" | u32le header_len | UTF-8 JSON header | float64 LE payload

The header lists ``tensors: [{name, shape, offset}]`` (byte offsets into the
payload) and a free-form ``meta`` object.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .envgen import OfflineDataset, PreferencePair, TrajectorySegment

DATASET_MAGIC = b"CAMPDS1\n"
CKPT_MAGIC = b"CAMPCKPT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _dump_header(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _split(raw: bytes, magic: bytes):
    if raw[:len(magic)] != magic:
        raise FormatError(f"bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    start = len(magic) + 4
    if len(raw) < start:
        raise FormatError("truncated header")
    (n,) = struct.unpack("<I", raw[len(magic):start])
    try:
        header = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    return header, raw[start + n:]


# ------------------------------------------------------------------ datasets

def dataset_bytes(ds: OfflineDataset) -> bytes:
    meta = ds.meta
    h, sd, ad = meta["h"], meta["state_dim"], meta["action_dim"]
    seg_floats = (h + 1) * sd + h * ad + h
    seg_stride = 4 * seg_floats
    pair_stride = 20
    n_seg, n_pair = len(ds.segments), len(ds.pairs)
    header = {k: v for k, v in meta.items()}
    header.update(
        version=FORMAT_VERSION, segment_count=n_seg, pair_count=n_pair,
        segment_task_ids=[int(s.task_id) for s in ds.segments],
        field_offsets={
            "segments": 0, "segment_stride": seg_stride,
            "states": 0, "actions": 4 * (h + 1) * sd, "rewards": 4 * ((h + 1) * sd + h * ad),
            "pairs": n_seg * seg_stride, "pair_stride": pair_stride,
        },
    )
    seg_block = np.empty((n_seg, seg_floats), dtype="<f4")
    for i, s in enumerate(ds.segments):
        seg_block[i] = np.concatenate([s.states.ravel(), s.actions.ravel(), s.rewards.ravel()])
    pair_dtype = np.dtype([("first", "<u4"), ("second", "<u4"), ("kind", "<u4"),
                           ("target", "<u4"), ("y", "<f4")])
    pair_block = np.empty(n_pair, dtype=pair_dtype)
    for i, p in enumerate(ds.pairs):
        pair_block[i] = (p.first, p.second, p.kind, p.target_task, p.label)
    hdr = _dump_header(header)
    return DATASET_MAGIC + struct.pack("<I", len(hdr)) + hdr + seg_block.tobytes() + pair_block.tobytes()


def save_dataset(path, ds: OfflineDataset) -> str:
    """Write ``ds`` and return the SHA-256 of the file bytes."""
    raw = dataset_bytes(ds)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def read_dataset_header(path) -> dict:
    header, _ = _split(Path(path).read_bytes(), DATASET_MAGIC)
    return header


def load_dataset(path) -> OfflineDataset:
    header, payload = _split(Path(path).read_bytes(), DATASET_MAGIC)
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {header.get('version')}")
    h, sd, ad = header["h"], header["state_dim"], header["action_dim"]
    n_seg, n_pair = header["segment_count"], header["pair_count"]
    seg_floats = (h + 1) * sd + h * ad + h
    need = 4 * seg_floats * n_seg + 20 * n_pair
    if len(payload) != need:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {need}")
    seg_block = np.frombuffer(payload, dtype="<f4", count=n_seg * seg_floats).reshape(n_seg, seg_floats)
    seg_block = seg_block.astype(np.float64)
    tids = header["segment_task_ids"]
    a0, r0 = (h + 1) * sd, (h + 1) * sd + h * ad
    segments = [TrajectorySegment(row[:a0].reshape(h + 1, sd).copy(), row[a0:r0].reshape(h, ad).copy(),
                                  row[r0:].copy(), int(tids[i])) for i, row in enumerate(seg_block)]
    pair_dtype = np.dtype([("first", "<u4"), ("second", "<u4"), ("kind", "<u4"),
                           ("target", "<u4"), ("y", "<f4")])
    pb = np.frombuffer(payload, dtype=pair_dtype, count=n_pair, offset=4 * seg_floats * n_seg)
    pairs = [PreferencePair(int(r["first"]), int(r["second"]), float(r["y"]), int(r["kind"]),
                            int(r["target"])) for r in pb]
    drop = {"version", "segment_count", "pair_count", "segment_task_ids", "field_offsets"}
    meta = {k: v for k, v in header.items() if k not in drop}
    ds = OfflineDataset(segments, pairs, meta)
    ds.validate()
    return ds


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------- checkpoints

def checkpoint_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    hdr = _dump_header({"version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}})
    return CKPT_MAGIC + struct.pack("<I", len(hdr)) + hdr + b"".join(chunks)


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors, meta))


def read_checkpoint_header(path) -> dict:
    header, _ = _split(Path(path).read_bytes(), CKPT_MAGIC)
    return header


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _split(Path(path).read_bytes(), CKPT_MAGIC)
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + 8 * n > len(payload):
            raise FormatError(f"tensor {e['name']} runs past the payload")
        out[e["name"]] = np.frombuffer(payload, dtype="<f8", count=n,
                                       offset=e["offset"]).reshape(tuple(e["shape"])).astype(np.float64)
    return out, header.get("meta", {})


def inspect_file(path) -> dict:
    """Header of any dataset or checkpoint file, tagged with its kind."""
    raw = Path(path).read_bytes()
    if raw.startswith(DATASET_MAGIC):
        header, _ = _split(raw, DATASET_MAGIC)
        load_dataset(path)
        return {"kind": "dataset", **header}
    if raw.startswith(CKPT_MAGIC):
        header, _ = _split(raw, CKPT_MAGIC)
        load_checkpoint(path)
        return {"kind": "checkpoint", **header}
    raise FormatError(f"{path}: not a dataset or checkpoint file")
