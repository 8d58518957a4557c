"""Binary and CSV persistence.

All binary layouts are little-endian:

``PERC``  magic, u16 version, u8 d, u32 L, f64 p, u64 seed, then the bond bits
          packed LSB-first, ``ceil(d L^d / 8)`` bytes.
``GCHI``  magic, u16 version, u8 d, u32 L, u64 n, then n records of
          (u64 vertex, d x f64 corrector components).
``GFLD``  magic, u16 version, u8 d, u32 L, u8 b, u64 n, then n records of
          (u64 undirected edge index, f64 value on (x, x + e_k)).
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .corrector import CorrectorField, DirectionField
from .lattice import BondConfiguration, LatticeSpec
from .walk import Trajectory

VERSION = 1
_PERC = struct.Struct("<4sHBIdQ")
_GCHI = struct.Struct("<4sHBIQ")
_GFLD = struct.Struct("<4sHBIBQ")


class FormatError(ValueError):
    """Malformed or mismatched artifact file."""


def _check_header(magic: bytes, want: bytes, version: int, path) -> None:
    if magic != want:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {want!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")


def perc_bytes(config: BondConfiguration) -> bytes:
    spec = config.spec
    head = _PERC.pack(b"PERC", VERSION, spec.d, spec.L, config.p, config.seed)
    return head + config.packed()


def write_perc(path, config: BondConfiguration) -> None:
    Path(path).write_bytes(perc_bytes(config))


def read_perc(path) -> BondConfiguration:
    raw = Path(path).read_bytes()
    if len(raw) < _PERC.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, d, L, p, seed = _PERC.unpack_from(raw)
    _check_header(magic, b"PERC", version, path)
    spec = LatticeSpec(d, L)
    n = spec.n_edges
    body = np.frombuffer(raw, dtype=np.uint8, offset=_PERC.size)
    if len(body) != (n + 7) // 8:
        raise FormatError(f"{path}: expected {(n + 7) // 8} bond bytes, found {len(body)}")
    bonds = np.unpackbits(body, count=n, bitorder="little").astype(bool)
    return BondConfiguration(spec, p, seed, bonds)


def write_gchi(path, chi: CorrectorField) -> None:
    spec = chi.spec
    rec = np.zeros(len(chi.vertices), dtype=[("v", "<u8"), ("chi", "<f8", (spec.d,))])
    rec["v"] = chi.vertices
    rec["chi"] = chi.values
    with open(path, "wb") as fh:
        fh.write(_GCHI.pack(b"GCHI", VERSION, spec.d, spec.L, len(rec)))
        fh.write(rec.tobytes())


def read_gchi(path, cluster_id: int = -1) -> CorrectorField:
    raw = Path(path).read_bytes()
    magic, version, d, L, n = _GCHI.unpack_from(raw)
    _check_header(magic, b"GCHI", version, path)
    dt = np.dtype([("v", "<u8"), ("chi", "<f8", (d,))])
    if len(raw) - _GCHI.size != n * dt.itemsize:
        raise FormatError(f"{path}: expected {n} records")
    rec = np.frombuffer(raw, dtype=dt, offset=_GCHI.size)
    return CorrectorField(LatticeSpec(d, L), cluster_id, rec["v"].astype(np.int64),
                          rec["chi"].copy())


def write_gfld(path, field: DirectionField) -> None:
    spec = field.spec
    rec = np.zeros(len(field.edges), dtype=[("e", "<u8"), ("g", "<f8")])
    rec["e"] = field.edges
    rec["g"] = field.values
    with open(path, "wb") as fh:
        fh.write(_GFLD.pack(b"GFLD", VERSION, spec.d, spec.L, field.b, len(rec)))
        fh.write(rec.tobytes())


def read_gfld(path) -> DirectionField:
    raw = Path(path).read_bytes()
    magic, version, d, L, b, n = _GFLD.unpack_from(raw)
    _check_header(magic, b"GFLD", version, path)
    dt = np.dtype([("e", "<u8"), ("g", "<f8")])
    if len(raw) - _GFLD.size != n * dt.itemsize:
        raise FormatError(f"{path}: expected {n} records")
    rec = np.frombuffer(raw, dtype=dt, offset=_GFLD.size)
    return DirectionField(LatticeSpec(d, L), b, rec["e"].astype(np.int64), rec["g"].copy())


# -- CSV ---------------------------------------------------------------------

def write_endpoints(path, endpoints: np.ndarray, seeds, t: float, eps: float) -> None:
    endpoints = np.asarray(endpoints)
    d = endpoints.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["walk_id", "seed", "t", "eps"] + [f"x{i + 1}" for i in range(d)])
        for i, (s, x) in enumerate(zip(seeds, endpoints)):
            w.writerow([i, int(s), repr(float(t)), repr(float(eps))] + [repr(float(v)) for v in x])


def read_endpoints(path) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Returns ``(endpoints, seeds, t, eps)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:4] != ["walk_id", "seed", "t", "eps"]:
        raise FormatError(f"{path}: unexpected header {header}")
    if not body:
        raise FormatError(f"{path}: no endpoints")
    arr = np.array(body, dtype=np.float64)
    return arr[:, 4:], arr[:, 1].astype(np.int64), float(arr[0, 2]), float(arr[0, 3])


def write_trajectories(path, trajectories: list[Trajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = trajectories[0].displacements.shape[1] if trajectories else 0
        w.writerow(["walk_id", "event_index", "time"] + [f"dx{i + 1}" for i in range(d)])
        for i, tr in enumerate(trajectories):
            for k, (t, dx) in enumerate(zip(tr.times, tr.displacements)):
                w.writerow([i, k, repr(float(t))] + [int(v) for v in dx])
