"""File formats for graphs and voxel sets.

Graphs travel either as CSV (human-editable, exact float round-trip via
repr) or as a binary container: an 8-byte magic, 8 reserved zero bytes, a
little-endian uint32 header length, a UTF-8 JSON header, then the samples
as little-endian float64 in C order. Voxel sets use the same container
shape with a bit-packed indicator payload.
"""

from __future__ import annotations

import csv
import json
import struct

import numpy as np

from .errors import ValidationError
from .geometry import (
    ConeGraph,
    GraphFunction,
    VoxelSet,
    extension_from_descriptor,
    extension_to_descriptor,
    exterior_from_descriptor,
    exterior_to_descriptor,
    trace_from_descriptor,
    trace_to_descriptor,
)

__all__ = [
    "save_graph_csv",
    "load_graph_csv",
    "save_graph_binary",
    "load_graph_binary",
    "save_voxels",
    "load_voxels",
    "graph_to_dict",
    "graph_from_dict",
]

GRAPH_MAGIC = b"NLMSGRF1"
VOXEL_MAGIC = b"NLMSVOX1"


def graph_to_dict(g) -> dict:
    if isinstance(g, ConeGraph):
        return {"kind": "cone", "trace": trace_to_descriptor(g.trace)}
    if isinstance(g, GraphFunction):
        return {
            "kind": "grid",
            "n": g.n,
            "m": g.m,
            "half_width": g.half_width,
            "boundary_tol": g.boundary_tol,
            "extension": extension_to_descriptor(g.extension),
            "samples": g.samples.ravel().tolist(),
        }
    raise ValidationError(f"cannot serialize graph of type {type(g).__name__}")


def graph_from_dict(d: dict):
    kind = d.get("kind", "grid")
    if kind == "cone":
        return ConeGraph(trace_from_descriptor(d["trace"]))
    if kind == "grid":
        n, m = int(d["n"]), int(d["m"])
        samples = np.asarray(d["samples"], dtype=float).reshape((m,) * n)
        return GraphFunction(
            samples,
            float(d["half_width"]),
            extension_from_descriptor(d["extension"]),
            boundary_tol=float(d.get("boundary_tol", 1e-9)),
        )
    raise ValidationError(f"unknown graph descriptor kind {kind!r}")


# ---------------------------------------------------------------------------
# CSV


def save_graph_csv(g: GraphFunction, path: str) -> None:
    if not isinstance(g, GraphFunction):
        raise ValidationError("CSV format stores grid graphs only")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["n", str(g.n)])
        w.writerow(["m", str(g.m)])
        w.writerow(["half_width", repr(g.half_width)])
        w.writerow(["boundary_tol", repr(g.boundary_tol)])
        w.writerow(["extension",
                    json.dumps(extension_to_descriptor(g.extension),
                               sort_keys=True)])
        w.writerow(["samples", ""])
        w.writerow(["index", "value"])
        for i, v in enumerate(g.samples.ravel()):
            w.writerow([str(i), repr(float(v))])


def load_graph_csv(path: str) -> GraphFunction:
    meta = {}
    samples = []
    in_samples = False
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            if not in_samples:
                if row[0] == "key":
                    continue
                if row[0] == "samples":
                    in_samples = True
                    continue
                meta[row[0]] = row[1]
            else:
                if row[0] == "index":
                    continue
                samples.append((int(row[0]), float(row[1])))
    try:
        n = int(meta["n"])
        m = int(meta["m"])
        half_width = float(meta["half_width"])
        ext = extension_from_descriptor(json.loads(meta["extension"]))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed graph CSV {path!r}: {exc}") from exc
    if len(samples) != m**n:
        raise ValidationError(
            f"graph CSV {path!r} holds {len(samples)} samples, expected {m**n}"
        )
    vals = np.empty(m**n)
    for i, v in samples:
        vals[i] = v
    return GraphFunction(
        vals.reshape((m,) * n),
        half_width,
        ext,
        boundary_tol=float(meta.get("boundary_tol", 1e-9)),
    )


# ---------------------------------------------------------------------------
# binary container


def _write_container(path: str, magic: bytes, header: dict, payload: bytes) -> None:
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(b"\x00" * 8)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(payload)


def _read_container(path: str, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        got = fh.read(8)
        if got != magic:
            raise ValidationError(
                f"{path!r} does not start with the expected magic {magic!r}"
            )
        fh.read(8)
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"corrupt header in {path!r}: {exc}") from exc
        return header, fh.read()


def save_graph_binary(g: GraphFunction, path: str) -> None:
    if not isinstance(g, GraphFunction):
        raise ValidationError("binary graph format stores grid graphs only")
    header = {
        "format": "graph",
        "n": g.n,
        "m": g.m,
        "half_width": g.half_width,
        "boundary_tol": g.boundary_tol,
        "extension": extension_to_descriptor(g.extension),
    }
    payload = np.ascontiguousarray(g.samples, dtype="<f8").tobytes()
    _write_container(path, GRAPH_MAGIC, header, payload)


def load_graph_binary(path: str) -> GraphFunction:
    header, payload = _read_container(path, GRAPH_MAGIC)
    try:
        n, m = int(header["n"]), int(header["m"])
        half_width = float(header["half_width"])
        ext = extension_from_descriptor(header["extension"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"malformed graph header in {path!r}: {exc}") from exc
    expect = m**n * 8
    if len(payload) != expect:
        raise ValidationError(
            f"graph payload in {path!r} is {len(payload)} bytes, expected {expect}"
        )
    vals = np.frombuffer(payload, dtype="<f8").astype(float).reshape((m,) * n)
    return GraphFunction(
        vals, half_width, ext, boundary_tol=float(header.get("boundary_tol", 1e-9))
    )


# ---------------------------------------------------------------------------
# voxel container


def save_voxels(v: VoxelSet, path: str) -> None:
    header = {
        "format": "voxels",
        "dim": v.dim,
        "origin": v.origin.tolist(),
        "cell": v.cell,
        "shape": list(v.shape),
        "exterior": exterior_to_descriptor(v.exterior),
    }
    payload = np.packbits(v.indicator.ravel().astype(np.uint8)).tobytes()
    _write_container(path, VOXEL_MAGIC, header, payload)


def load_voxels(path: str) -> VoxelSet:
    header, payload = _read_container(path, VOXEL_MAGIC)
    try:
        shape = tuple(int(s) for s in header["shape"])
        origin = header["origin"]
        cell = float(header["cell"])
        ext = exterior_from_descriptor(header["exterior"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"malformed voxel header in {path!r}: {exc}") from exc
    count = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count)
    return VoxelSet(origin, cell, bits.astype(bool).reshape(shape), ext)
