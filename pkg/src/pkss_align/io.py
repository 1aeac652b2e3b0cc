"""Point cloud file formats: PLY (ascii and binary little-endian), OBJ and XYZ."""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from .geometry import PointCloud

logger = logging.getLogger(__name__)

FORMATS = ("ply", "obj", "xyz")
_EXTENSIONS = {".ply": "ply", ".obj": "obj", ".xyz": "xyz", ".txt": "xyz", ".pts": "xyz"}
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}  # fmt: skip


class CloudParseError(ValueError):
    """A file could not be read as a point cloud; the message names the location."""


def detect_format(path) -> str:
    """Format from the file extension, falling back to the leading bytes."""
    path = Path(path)
    fmt = _EXTENSIONS.get(path.suffix.lower())
    if fmt:
        return fmt
    with open(path, "rb") as fh:
        head = fh.read(4096)
    if head.startswith(b"ply"):
        return "ply"
    for line in head.splitlines():
        if line.startswith((b"v ", b"vn ", b"f ", b"o ", b"g ")):
            return "obj"
    return "xyz"


def _cloud(path, points: np.ndarray, normals: np.ndarray | None) -> PointCloud:
    if len(points) == 0:
        raise CloudParseError(f"{path}: no points")
    if normals is not None:
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(lengths == 0) or not np.all(np.isfinite(lengths)):
            logger.warning("%s: zero or invalid normals, dropping them", path)
            normals = None
        else:
            normals = normals / lengths
    return PointCloud(points, normals)


def _finite_row(path, values, lineno: int):
    if not all(np.isfinite(values)):
        raise CloudParseError(f"{path}: line {lineno}: non-finite coordinate")


def load_xyz(path) -> PointCloud:
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.replace(",", " ").split()
            if len(parts) not in (3, 6):
                raise CloudParseError(f"{path}: line {lineno}: expected 3 or 6 columns, got {len(parts)}")
            if width is not None and len(parts) != width:
                raise CloudParseError(f"{path}: line {lineno}: column count changed from {width} to {len(parts)}")
            width = len(parts)
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise CloudParseError(f"{path}: line {lineno}: {exc}") from None
            _finite_row(path, values, lineno)
            rows.append(values)
    data = np.array(rows, dtype=np.float64).reshape(-1, width or 3)
    normals = data[:, 3:6] if width == 6 else None
    return _cloud(path, data[:, :3], normals)


def load_obj(path) -> PointCloud:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0] != "v":
                continue
            if len(parts) < 4:
                raise CloudParseError(f"{path}: line {lineno}: vertex needs three coordinates")
            try:
                values = [float(p) for p in parts[1:4]]
            except ValueError as exc:
                raise CloudParseError(f"{path}: line {lineno}: {exc}") from None
            _finite_row(path, values, lineno)
            rows.append(values)
    return _cloud(path, np.array(rows, dtype=np.float64).reshape(-1, 3), None)


def _read_ply_header(path, fh):
    """Parse the header; returns (encoding, elements, data offset)."""
    magic = fh.readline()
    if magic.rstrip(b"\r\n") != b"ply":
        raise CloudParseError(f"{path}: line 1: missing 'ply' magic")
    encoding = None
    elements: list[tuple[str, int, list]] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise CloudParseError(f"{path}: line {lineno}: header ends before end_header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "end_header":
            break
        if key == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise CloudParseError(f"{path}: line {lineno}: unsupported format {' '.join(parts[1:])!r}")
            encoding = parts[1]
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise CloudParseError(f"{path}: line {lineno}: malformed element line")
            elements.append((parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise CloudParseError(f"{path}: line {lineno}: property before any element")
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise CloudParseError(f"{path}: line {lineno}: unknown list type")
                elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise CloudParseError(f"{path}: line {lineno}: malformed property line")
        else:
            raise CloudParseError(f"{path}: line {lineno}: unexpected header keyword {key!r}")
    if encoding is None:
        raise CloudParseError(f"{path}: header has no format line")
    return encoding, elements, fh.tell(), lineno


def _vertex_columns(path, props):
    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise CloudParseError(f"{path}: vertex element lacks property {axis!r}")
    has_normals = all(n in names for n in ("nx", "ny", "nz"))
    return names, has_normals


def load_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        encoding, elements, offset, header_lines = _read_ply_header(path, fh)
        data = fh.read()
    if not any(e[0] == "vertex" for e in elements):
        raise CloudParseError(f"{path}: no vertex element")
    if encoding == "ascii":
        return _ply_ascii(path, elements, data, header_lines)
    return _ply_binary(path, elements, data, offset)


def _ply_ascii(path, elements, data: bytes, header_lines: int) -> PointCloud:
    lines = data.decode("ascii", errors="replace").splitlines()
    cursor = 0
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        cols, has_normals = _vertex_columns(path, props)
        if any(len(p) == 4 for p in props):
            raise CloudParseError(f"{path}: list properties on vertices are not supported")
        if cursor + count > len(lines):
            raise CloudParseError(f"{path}: line {header_lines + len(lines) + 1}: expected {count} vertex rows")
        rows = np.empty((count, len(cols)))
        for i in range(count):
            lineno = header_lines + cursor + i + 1
            parts = lines[cursor + i].split()
            if len(parts) != len(cols):
                raise CloudParseError(f"{path}: line {lineno}: expected {len(cols)} values, got {len(parts)}")
            try:
                rows[i] = [float(p) for p in parts]
            except ValueError as exc:
                raise CloudParseError(f"{path}: line {lineno}: {exc}") from None
            if not np.all(np.isfinite(rows[i, [cols.index(a) for a in "xyz"]])):
                raise CloudParseError(f"{path}: line {lineno}: non-finite coordinate")
        pts = rows[:, [cols.index(a) for a in "xyz"]]
        normals = rows[:, [cols.index(a) for a in ("nx", "ny", "nz")]] if has_normals else None
        return _cloud(path, pts, normals)
    raise AssertionError("unreachable")


def _ply_binary(path, elements, data: bytes, offset: int) -> PointCloud:
    pos = 0
    for name, count, props in elements:
        if any(len(p) == 4 for p in props):
            if name == "vertex":
                raise CloudParseError(f"{path}: list properties on vertices are not supported")
            # Elements after the vertices are never needed.
            raise CloudParseError(f"{path}: byte {offset + pos}: list element {name!r} precedes vertices")
        dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
        size = dtype.itemsize * count
        if pos + size > len(data):
            raise CloudParseError(
                f"{path}: byte {offset + len(data)}: short read in element {name!r}, "
                f"needed {size} bytes from byte {offset + pos}"
            )
        if name != "vertex":
            pos += size
            continue
        _, has_normals = _vertex_columns(path, props)
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pts = np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
        bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
        if len(bad):
            raise CloudParseError(f"{path}: byte {offset + pos + int(bad[0]) * dtype.itemsize}: non-finite coordinate")
        normals = np.stack([rec[a].astype(np.float64) for a in ("nx", "ny", "nz")], axis=1) if has_normals else None
        return _cloud(path, pts, normals)
    raise AssertionError("unreachable")


def load_cloud(path, fmt: str = "auto") -> PointCloud:
    """Read a point cloud.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        CloudParseError: on malformed content.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if fmt == "auto":
        fmt = detect_format(path)
    if fmt == "ply":
        return load_ply(path)
    if fmt == "obj":
        return load_obj(path)
    if fmt == "xyz":
        return load_xyz(path)
    raise ValueError(f"unknown format {fmt!r}")


def save_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    cols = [cloud.points] + ([cloud.normals] if cloud.has_normals else [])
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.has_normals else [])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    table = np.hstack(cols)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
        else:
            np.savetxt(fh, table, fmt="%.17g")


def save_cloud(path, cloud: PointCloud, fmt: str = "auto", binary: bool = True) -> None:
    """Write ``cloud``; the format follows the extension unless given."""
    path = Path(path)
    if fmt == "auto":
        fmt = _EXTENSIONS.get(path.suffix.lower(), "ply")
    tmp = path.with_name(path.name + ".tmp")
    if fmt == "ply":
        save_ply(tmp, cloud, binary)
    elif fmt == "xyz":
        table = np.hstack([cloud.points] + ([cloud.normals] if cloud.has_normals else []))
        np.savetxt(tmp, table, fmt="%.17g")
    elif fmt == "obj":
        np.savetxt(tmp, cloud.points, fmt="v %.17g %.17g %.17g")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    os.replace(tmp, path)
