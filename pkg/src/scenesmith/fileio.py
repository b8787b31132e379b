"""File formats: binary PLY, D4DD/D4DF float rasters, PNG.

D4DD depth raster: 8-byte header (magic "D4DD", u16 width, u16 height,
little-endian) followed by row-major float32 values.
D4DF feature raster: 10-byte header (magic "D4DF", u16 width, u16 height,
u16 channels) followed by row-major, channel-last float32 values.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputFormatError

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("u1", 1), "uint8": ("u1", 1),
    "char": ("i1", 1), "int8": ("i1", 1),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
    "int": ("<i4", 4), "int32": ("<i4", 4),
}


def write_ply(path, columns: dict[str, np.ndarray]) -> None:
    """Write a binary little-endian PLY with one vertex element.

    `columns` maps property name -> 1-D array; float arrays are stored as
    float32, integer arrays as uchar.
    """
    names = list(columns)
    n = len(columns[names[0]])
    fields = []
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name in names:
        arr = np.asarray(columns[name])
        if len(arr) != n:
            raise ValueError("all PLY columns must share one length")
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.uint8:
            header.append(f"property uchar {name}")
            fields.append((name, "u1"))
        else:
            header.append(f"property float {name}")
            fields.append((name, "<f4"))
    header.append("end_header")
    rec = np.zeros(n, dtype=fields)
    for name, dt in fields:
        rec[name] = np.asarray(columns[name]).astype(dt)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> dict[str, np.ndarray]:
    """Read a binary or ascii PLY vertex element into {property: array}."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise InputFormatError(f"{path}: not a PLY file")
    end = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    count = None
    fields = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise InputFormatError(f"{path}: list properties unsupported")
            if tok[1] not in _PLY_TYPES:
                raise InputFormatError(f"{path}: unknown property type {tok[1]}")
            fields.append((tok[2], _PLY_TYPES[tok[1]][0]))
    if count is None or not fields:
        raise InputFormatError(f"{path}: no vertex element")
    if fmt == "binary_little_endian":
        rec = np.frombuffer(data, dtype=fields, count=count, offset=end)
    elif fmt == "ascii":
        body = data[end:].decode("ascii").split()
        vals = np.array(body[: count * len(fields)], dtype=np.float64)
        vals = vals.reshape(count, len(fields))
        rec = np.zeros(count, dtype=fields)
        for i, (name, _) in enumerate(fields):
            rec[name] = vals[:, i]
    else:
        raise InputFormatError(f"{path}: unsupported PLY format {fmt}")
    return {name: np.array(rec[name]) for name, _ in fields}


def save_pointcloud_ply(path, pc) -> None:
    cols = {
        "x": pc.positions[:, 0], "y": pc.positions[:, 1], "z": pc.positions[:, 2],
        "red": pc.colors[:, 0], "green": pc.colors[:, 1], "blue": pc.colors[:, 2],
    }
    if pc.normals is not None:
        cols.update(nx=pc.normals[:, 0], ny=pc.normals[:, 1], nz=pc.normals[:, 2])
    cols["mass"] = pc.masses
    write_ply(path, cols)


def load_pointcloud_ply(path):
    from .pointcloud import PointCloud

    cols = read_ply(path)
    for key in ("x", "y", "z"):
        if key not in cols:
            raise InputFormatError(f"{path}: missing vertex property {key}")
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    n = len(pos)
    if all(k in cols for k in ("red", "green", "blue")):
        col = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        col = col.astype(np.float64)
        if col.max(initial=0.0) > 1.0:  # uchar-coded colors
            col = col / 255.0
    else:
        col = np.full((n, 3), 0.5)
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        normals = normals.astype(np.float64)
    masses = cols["mass"].astype(np.float64) if "mass" in cols else None
    return PointCloud(positions=pos, colors=col, normals=normals, masses=masses)


def write_depth_raster(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError("depth raster must be H x W")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"D4DD" + struct.pack("<HH", w, h))
        f.write(np.ascontiguousarray(depth).tobytes())


def read_depth_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8 or head[:4] != b"D4DD":
            raise InputFormatError(f"{path}: bad D4DD header")
        w, h = struct.unpack("<HH", head[4:])
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
    if data.size != w * h:
        raise InputFormatError(f"{path}: truncated D4DD payload")
    return data.reshape(h, w).copy()


def write_feature_raster(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float32)
    if features.ndim == 2:
        features = features[:, :, None]
    if features.ndim != 3:
        raise ValueError("feature raster must be H x W x F")
    h, w, c = features.shape
    with open(path, "wb") as f:
        f.write(b"D4DF" + struct.pack("<HHH", w, h, c))
        f.write(np.ascontiguousarray(features).tobytes())


def read_feature_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(10)
        if len(head) != 10 or head[:4] != b"D4DF":
            raise InputFormatError(f"{path}: bad D4DF header")
        w, h, c = struct.unpack("<HHH", head[4:])
        data = np.frombuffer(f.read(4 * w * h * c), dtype="<f4")
    if data.size != w * h * c:
        raise InputFormatError(f"{path}: truncated D4DF payload")
    return data.reshape(h, w, c).copy()


def png_bytes(image: np.ndarray) -> bytes:
    """Encode [0,1] float (or bool/uint8) image deterministically as PNG."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, image: np.ndarray) -> None:
    Path(path).write_bytes(png_bytes(image))


def read_png(path) -> np.ndarray:
    """Read a PNG as float64 in [0,1]; grayscale stays 2-D, color is H x W x 3."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise InputFormatError(f"{path}: {exc}") from exc
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if len(img.getbands()) > 2 else "L")
    return np.asarray(img, dtype=np.float64) / 255.0


def read_mask_png(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return (arr > 0.5).astype(np.uint8)
