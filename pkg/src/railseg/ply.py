"""Minimal PLY 1.0 reader/writer for labeled point clouds.

Only the ``vertex`` element is interpreted. Coordinates are read from the
``x``, ``y``, ``z`` properties and labels from ``class``; any other vertex
property (and any other element) is skipped. Both ``ascii`` and
``binary_little_endian`` encodings are supported. List properties are only
supported in ASCII files and on elements other than ``vertex``.
"""

from __future__ import annotations

import os

import numpy as np

from .pointcloud import LabelSchema, PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError("malformed header: missing 'ply' magic")
    fmt = None
    elements: list[list] = []  # [name, count, [(prop, dtype | ('list', ct, it))]]
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("malformed header: no end_header")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        key = words[0]
        if key == "end_header":
            break
        if key == "format":
            if len(words) != 3 or words[2] != "1.0":
                raise PlyError(f"malformed header: bad format line {line!r}")
            fmt = words[1]
        elif key == "element":
            if len(words) != 3:
                raise PlyError(f"malformed header: bad element line {line!r}")
            try:
                count = int(words[2])
            except ValueError as exc:
                raise PlyError(f"malformed header: bad element count {words[2]!r}") from exc
            if count < 0:
                raise PlyError("malformed header: negative element count")
            elements.append([words[1], count, []])
        elif key == "property":
            if not elements:
                raise PlyError("malformed header: property before element")
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise PlyError(f"malformed header: unknown type in {line!r}")
                elements[-1][2].append((words[4], ("list", words[2], words[3])))
            elif len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
            else:
                raise PlyError(f"malformed header: bad property line {line!r}")
        else:
            raise PlyError(f"malformed header: unexpected keyword {key!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported or missing format: {fmt!r}")
    return fmt, elements


def _read_binary(fh, elements):
    vertex = None
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            if name == "vertex":
                raise PlyError("list properties on vertex are not supported")
            if count:
                raise PlyError(f"binary list element {name!r} cannot be skipped")
            continue
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        raw = fh.read(dtype.itemsize * count)
        if len(raw) != dtype.itemsize * count:
            raise PlyError(f"truncated data in element {name!r}")
        data = np.frombuffer(raw, dtype=dtype, count=count)
        if name == "vertex":
            vertex = data
    return vertex


def _read_ascii(fh, elements):
    lines = iter(fh.read().decode("ascii").splitlines())
    vertex = None
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            try:
                words = next(lines).split()
            except StopIteration as exc:
                raise PlyError(f"truncated data in element {name!r}") from exc
            if name != "vertex":
                continue
            if len(words) < len(props):
                raise PlyError("malformed vertex row")
            rows.append(tuple(words[: len(props)]))
        if name == "vertex":
            if any(isinstance(t, tuple) for _, t in props):
                raise PlyError("list properties on vertex are not supported")
            dtype = np.dtype([(p, t) for p, t in props])
            out = np.empty(count, dtype=dtype)
            try:
                for j, (p, _) in enumerate(props):
                    col = np.array([r[j] for r in rows], dtype=np.float64)
                    info = np.iinfo(out[p].dtype) if out[p].dtype.kind in "iu" else None
                    if info is not None and col.size and (col.min() < info.min or col.max() > info.max):
                        raise PlyError(f"value out of range for property {p!r}")
                    out[p] = col
            except ValueError as exc:
                raise PlyError(f"malformed vertex value: {exc}") from exc
            vertex = out
    return vertex


def load_ply(path: str | os.PathLike, schema: LabelSchema | None = None) -> PointCloud:
    """Read a labeled cloud; position dtype follows the file's x/y/z type."""
    schema = schema or LabelSchema()
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise PlyError("malformed header: no vertex element")
        vprops = dict(elements[names.index("vertex")][2])
        for p in ("x", "y", "z", "class"):
            if p not in vprops:
                raise PlyError(f"malformed header: vertex lacks property {p!r}")
        vertex = _read_binary(fh, elements) if fmt != "ascii" else _read_ascii(fh, elements)

    xyz_types = {vprops[p] for p in ("x", "y", "z")}
    dtype = np.float64 if xyz_types != {"f4"} else np.float32
    pos = np.stack([vertex[p].astype(dtype) for p in ("x", "y", "z")], axis=1)
    pos = pos.reshape(-1, 3)
    if not np.all(np.isfinite(pos)):
        raise PlyError("non-finite coordinate")
    cls = np.asarray(vertex["class"])
    if cls.size and (cls.min() < 0 or cls.max() >= schema.C):
        raise PlyError("label out of range")
    return PointCloud(pos, cls.astype(np.int64), schema)


def save_ply(cloud: PointCloud, path: str | os.PathLike, ascii_flag: bool = False) -> None:
    """Write ``cloud`` as PLY with properties x, y, z and uchar ``class``.

    float32 clouds are written as ``float`` and float64 clouds as ``double``
    so that a binary round-trip is exact. ASCII coordinates are printed with
    six decimal places.
    """
    ptype = "float" if cloud.positions.dtype == np.float32 else "double"
    header = (
        "ply\n"
        f"format {'ascii' if ascii_flag else 'binary_little_endian'} 1.0\n"
        "comment railseg labeled point cloud\n"
        f"element vertex {cloud.n}\n"
        f"property {ptype} x\n"
        f"property {ptype} y\n"
        f"property {ptype} z\n"
        "property uchar class\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if ascii_flag:
            lines = [
                f"{x:.6f} {y:.6f} {z:.6f} {c:d}\n"
                for (x, y, z), c in zip(cloud.positions.tolist(), cloud.labels.tolist())
            ]
            fh.write("".join(lines).encode("ascii"))
        else:
            t = "<f4" if ptype == "float" else "<f8"
            rec = np.empty(cloud.n, dtype=[("x", t), ("y", t), ("z", t), ("class", "u1")])
            for k, p in enumerate("xyz"):
                rec[p] = cloud.positions[:, k]
            rec["class"] = cloud.labels
            fh.write(rec.tobytes())
