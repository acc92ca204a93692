"""Binary model checkpoints and training-log CSV.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then every tensor as contiguous little-endian float32 in manifest order.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from advbmt.errors import CheckpointError
from advbmt.model import BmtConfig, BmtModel
from advbmt.scenario import atomic_write_bytes, atomic_write_text
from advbmt.training import TrainLogRow

MAGIC = b"ADVBMT\x00\x01"
FORMAT_VERSION = 1
LOG_COLUMNS = ("step", "loss", "accuracy_fwd", "accuracy_rev", "perplexity", "clusters")


def checkpoint_bytes(model: BmtModel) -> bytes:
    tensors = [("param", k, v) for k, v in sorted(model.params.items())]
    tensors += [("buffer", k, v) for k, v in sorted(model.buffers.items())]
    manifest, offset = [], 0
    for group, name, arr in tensors:
        manifest.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": model.cfg.to_dict(), "tensors": manifest, "data_bytes": offset},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<Q", len(header)))
    out.write(header)
    for _, _, arr in tensors:
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def save_checkpoint(model: BmtModel, path: str | Path) -> None:
    atomic_write_bytes(Path(path), checkpoint_bytes(model))


def read_header(blob: bytes) -> tuple[dict, int]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16: 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    return header, 16 + n


def load_checkpoint(path: str | Path, expect: BmtConfig | None = None, dtype=np.float32) -> BmtModel:
    """Load a model; ``expect`` raises CheckpointError on any config mismatch."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, start = read_header(blob)
    try:
        cfg = BmtConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config in checkpoint: {exc}") from exc
    if expect is not None and expect.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expect.to_dict().items() if cfg.to_dict().get(k) != v)
        raise CheckpointError(f"checkpoint/config mismatch in {', '.join(diff)}")
    if len(blob) - start != header["data_bytes"]:
        raise CheckpointError("checkpoint data length does not match its header")
    data = blob[start:]
    params, buffers = {}, {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"])
        (params if t["group"] == "param" else buffers)[t["name"]] = arr
    ref = BmtModel(cfg)
    for name, arr in ref.params.items():
        if name not in params or params[name].shape != arr.shape:
            raise CheckpointError(f"checkpoint parameter {name} missing or misshapen")
    for name, arr in ref.buffers.items():
        if name not in buffers or buffers[name].shape != arr.shape:
            raise CheckpointError(f"checkpoint buffer {name} missing or misshapen")
    return BmtModel(cfg, params, buffers, dtype=dtype)


def training_log_csv(rows: Sequence[TrainLogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        d = asdict(r)
        w.writerow([d["step"]] + [repr(float(d[c])) for c in LOG_COLUMNS[1:5]] + [d["clusters"]])
    return buf.getvalue()


def save_training_log(rows: Sequence[TrainLogRow], path: str | Path) -> None:
    atomic_write_text(Path(path), training_log_csv(rows))
