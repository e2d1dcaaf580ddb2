"""``.upm`` map files and CSV/PNG exports.

Layout (all integers little-endian)::

    magic        b"UPM\\x00"
    uint32       header length in bytes
    header       UTF-8 JSON, sorted keys: version, geometry, num_classes,
                 strategy, next_instance_id
    chunks       repeated: 4-byte tag, uint64 payload length, payload

Chunks, in this order:

    CELL  uint32[M]        flat indices (row * width + col) of observed cells
    NCNT  uint32[M]        measurement counts
    ACCU  float64[M, K]    strategy accumulator rows
    IVOT  uint32[V, 3]     (flat index, instance id, votes), sorted
    LMRK  records          (uint32 id, int32 class, float64 x, y, z, uint64 count)
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .core import GridGeometry, UNKNOWN, class_name
from .panoptic_map import Landmark, PanopticGridMap

MAGIC = b"UPM\x00"
VERSION = 1

_LMRK = np.dtype([("id", "<u4"), ("class", "<i4"), ("center", "<f8", (3,)), ("count", "<u8")])


class MapFileError(ValueError):
    """Corrupt or unreadable map file."""


class MapVersionError(MapFileError):
    """Map file written by an incompatible format version."""


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def map_to_bytes(m: PanopticGridMap) -> bytes:
    header = {
        "version": VERSION,
        "geometry": m.geometry.to_dict(),
        "num_classes": m.num_classes,
        "strategy": m.strategy.value,
        "next_instance_id": m.next_instance_id,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = np.flatnonzero(m.count.reshape(-1) > 0)
    acc = m.accumulator.reshape(-1, m.num_classes)[flat]
    votes = sorted((c, i, n) for c, ctr in m.votes.items() for i, n in ctr.items() if n > 0)
    lm = np.zeros(len(m.landmarks), dtype=_LMRK)
    for j, lid in enumerate(sorted(m.landmarks)):
        l = m.landmarks[lid]
        lm[j] = (l.id, l.class_id, l.center, l.count)
    parts = [
        MAGIC,
        struct.pack("<I", len(hb)),
        hb,
        _chunk(b"CELL", flat.astype("<u4").tobytes()),
        _chunk(b"NCNT", m.count.reshape(-1)[flat].astype("<u4").tobytes()),
        _chunk(b"ACCU", acc.astype("<f8").tobytes()),
        _chunk(b"IVOT", np.asarray(votes, dtype="<u4").reshape(-1, 3).tobytes()),
        _chunk(b"LMRK", lm.tobytes()),
    ]
    return b"".join(parts)


def save_map(m: PanopticGridMap, path) -> None:
    Path(path).write_bytes(map_to_bytes(m))


def map_from_bytes(raw: bytes) -> PanopticGridMap:
    if raw[:4] != MAGIC:
        raise MapFileError("not a map file (bad magic)")
    try:
        (hl,) = struct.unpack_from("<I", raw, 4)
        header = json.loads(raw[8 : 8 + hl].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MapFileError(f"corrupt header: {exc}") from exc
    if header.get("version") != VERSION:
        raise MapVersionError(f"map file version {header.get('version')} != supported {VERSION}")
    try:
        geom = GridGeometry.from_dict(header["geometry"])
        k = int(header["num_classes"])
        m = PanopticGridMap(geom, header["strategy"], k)
        m.next_instance_id = int(header["next_instance_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MapFileError(f"invalid header: {exc}") from exc

    chunks = {}
    pos = 8 + hl
    while pos < len(raw):
        if pos + 12 > len(raw):
            raise MapFileError("truncated chunk header")
        tag = raw[pos : pos + 4]
        (n,) = struct.unpack_from("<Q", raw, pos + 4)
        pos += 12
        if pos + n > len(raw):
            raise MapFileError(f"truncated chunk {tag!r}")
        chunks[tag] = raw[pos : pos + n]
        pos += n
    for tag in (b"CELL", b"NCNT", b"ACCU", b"IVOT", b"LMRK"):
        if tag not in chunks:
            raise MapFileError(f"missing chunk {tag!r}")
    try:
        flat = np.frombuffer(chunks[b"CELL"], dtype="<u4").astype(np.int64)
        cnt = np.frombuffer(chunks[b"NCNT"], dtype="<u4").astype(np.int64)
        acc = np.frombuffer(chunks[b"ACCU"], dtype="<f8").reshape(len(flat), k)
        votes = np.frombuffer(chunks[b"IVOT"], dtype="<u4").reshape(-1, 3)
        lm = np.frombuffer(chunks[b"LMRK"], dtype=_LMRK)
    except ValueError as exc:
        raise MapFileError(f"inconsistent chunk sizes: {exc}") from exc
    if len(cnt) != len(flat) or (len(flat) and flat.max() >= geom.width * geom.height):
        raise MapFileError("cell table does not match geometry")
    m.count.reshape(-1)[flat] = cnt
    m.accumulator.reshape(-1, k)[flat] = acc
    for c, i, n in votes.tolist():
        m.votes[c][i] = n
    for rec in lm:
        m.landmarks[int(rec["id"])] = Landmark(
            int(rec["id"]), int(rec["class"]), rec["center"].astype(float).copy(), int(rec["count"]))
    return m


def load_map(path) -> PanopticGridMap:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise MapFileError(f"cannot read {path}: {exc}") from exc
    return map_from_bytes(raw)


def export_landmarks_csv(m: PanopticGridMap, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "class", "x", "y", "z", "count"])
        for lid in sorted(m.landmarks):
            l = m.landmarks[lid]
            w.writerow([l.id, class_name(l.class_id), *(f"{v:.6f}" for v in l.center), l.count])


# class colours for raster previews; unknown is black
_PALETTE = np.array([
    [128, 64, 128],  # drivable_area
    [255, 220, 0],  # road_marking
    [30, 90, 255],  # traffic_sign
    [0, 200, 60],  # traffic_light
], dtype=np.uint8)


def export_rasters(m: PanopticGridMap, out_dir, truth: PanopticGridMap | None = None) -> list[Path]:
    """Write class/uncertainty (and error, given ``truth``) rasters as PNG.

    Images are flipped so that +y points up.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cls = m.class_raster()
    written = []
    rgb = np.zeros(cls.shape + (3,), dtype=np.uint8)
    lab = cls != UNKNOWN
    rgb[lab] = _PALETTE[cls[lab] % len(_PALETTE)]
    p = out / "class.png"
    Image.fromarray(rgb[::-1]).save(p)
    written.append(p)

    u = m.uncertainty_raster()
    gray = np.where(np.isnan(u), 0, np.round(np.nan_to_num(u) * 255)).astype(np.uint8)
    p = out / "uncertainty.png"
    Image.fromarray(gray[::-1]).save(p)
    written.append(p)

    if truth is not None:
        t = truth.class_raster()
        both = lab & (t != UNKNOWN)
        err = np.zeros(cls.shape, dtype=np.uint8)
        err[both] = 80
        err[both & (cls != t)] = 255
        p = out / "error.png"
        Image.fromarray(err[::-1]).save(p)
        written.append(p)
    return written
