"""File formats.

Trajectory export (JSON lines)
    One object per collision with the keys, in this order: ``time``, ``pair``,
    ``offset``, ``normal``, ``cos_phi``, ``rel_speed``, ``tangency_margin``,
    ``simultaneity_gap`` (``null`` when there is no other collision).

Phase-point checkpoint (binary, little-endian)
    ``b"HBCK"``, u16 format version (1), u16 reserved (0), u32 N, u32 nu,
    then ``q`` and ``v`` as ``N*nu`` IEEE-754 doubles each, row-major.

Collision-graph edge list (text)
    One ``"i j t"`` line per collision, labels 0-based, ``t`` in ``repr``
    form.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core import PhasePoint
from .flow import CollisionRecord, Trajectory

MAGIC = b"HBCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str):
    """Write ``data`` next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    """Canonical JSON text used for every report (stable across runs)."""
    return json.dumps(obj, indent=1, allow_nan=True) + "\n"


def trajectory_jsonl(traj: Trajectory) -> str:
    return "".join(json.dumps(rec.as_dict()) + "\n" for rec in traj.records)


def parse_trajectory_jsonl(text: str) -> list[CollisionRecord]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        gap = d["simultaneity_gap"]
        out.append(CollisionRecord(
            time=d["time"], pair=tuple(d["pair"]), offset=tuple(d["offset"]), normal=tuple(d["normal"]),
            cos_phi=d["cos_phi"], rel_speed=d["rel_speed"], tangency_margin=d["tangency_margin"],
            simultaneity_gap=float("inf") if gap is None else gap))
    return out


def checkpoint_bytes(state: PhasePoint) -> bytes:
    N, nu = state.q.shape
    head = _HEADER.pack(MAGIC, CHECKPOINT_VERSION, 0, N, nu)
    return head + state.q.astype("<f8").tobytes() + state.v.astype("<f8").tobytes()


def load_checkpoint(data: bytes) -> PhasePoint:
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint too short")
    magic, version, _, N, nu = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    n = N * nu
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != 2 * n:
        raise FormatError(f"expected {2 * n} doubles, found {body.size}")
    return PhasePoint(body[:n].reshape(N, nu), body[n:].reshape(N, nu))


def edge_list(records, start: int = 0, stop: int | None = None) -> str:
    recs = records[start:stop]
    return "".join(f"{r.pair[0]} {r.pair[1]} {r.time!r}\n" for r in recs)


def csv_text(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def state_dict(state: PhasePoint) -> dict:
    return {"q": state.q.tolist(), "v": state.v.tolist()}
