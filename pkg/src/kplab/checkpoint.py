"""KPCHK1 checkpoint files.

Binary layout, all integers and reals little-endian::

    offset  size  field
    0       6     magic b"KPCHK1"
    6       1     version: 1 = plain training series, 2 = distillation series
    7       1     phase flag, present only when version == 2:
                  1 = "phase1" (feature matching), 2 = "final" (head trained)
    .       4     u32 epoch count M
    .       8     u64 parameter count P
    .       8*P*(M+1)  float64 snapshots w_0 .. w_M, one row of P values per epoch

A JSON sidecar ``<path>.json`` holds the non-array metadata (seed, loss
curve, accuracy) so a series can be reloaded exactly.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .nn import CheckpointSeries

MAGIC = b"KPCHK1"
PHASE_FLAGS = {"phase1": 1, "final": 2}
_FLAG_PHASE = {v: k for k, v in PHASE_FLAGS.items()}


def encode(series: CheckpointSeries) -> bytes:
    w = np.ascontiguousarray(series.weights, dtype="<f8")
    if series.phase in PHASE_FLAGS:
        head = MAGIC + struct.pack("<BB", 2, PHASE_FLAGS[series.phase])
    else:
        head = MAGIC + struct.pack("<B", 1)
    return head + struct.pack("<IQ", w.shape[0] - 1, w.shape[1]) + w.tobytes()


def decode(blob: bytes) -> tuple:
    """Return ``(weights, phase)`` from KPCHK1 bytes."""
    if blob[:6] != MAGIC:
        raise ValueError("not a KPCHK1 file")
    version = blob[6]
    pos = 7
    if version == 1:
        phase = "train"
    elif version == 2:
        phase = _FLAG_PHASE.get(blob[7])
        if phase is None:
            raise ValueError(f"unknown phase flag {blob[7]}")
        pos = 8
    else:
        raise ValueError(f"unsupported KPCHK1 version {version}")
    m, p = struct.unpack_from("<IQ", blob, pos)
    pos += 12
    need = pos + 8 * p * (m + 1)
    if len(blob) != need:
        raise ValueError(f"KPCHK1 payload is {len(blob)} bytes, header implies {need}")
    w = np.frombuffer(blob, dtype="<f8", offset=pos).reshape(m + 1, p).astype(np.float64)
    return w, phase


def save_series(path, series: CheckpointSeries) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(series))
    meta = {"seed": series.seed, "loss_curve": list(map(float, series.loss_curve)),
            "accuracy": series.accuracy, "phase": series.phase}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def load_series(path) -> CheckpointSeries:
    path = Path(path)
    weights, phase = decode(path.read_bytes())
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return CheckpointSeries(weights, seed=meta.get("seed", 0), loss_curve=meta.get("loss_curve", []),
                            accuracy=meta.get("accuracy"), phase=phase)
