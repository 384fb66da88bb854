"""Volumes and their on-disk form: a MetaImage subset.

A Volume is a (Z, Y, X) scalar grid with per-axis spacing in millimetres and
a physical origin (the centre of voxel (0,0,0)). Intensity volumes are
float32 (MET_FLOAT), label volumes uint8 (MET_UCHAR).

On disk: a plain-text header of ``Key = Value`` lines followed by (or next
to) a little-endian raw body. ``.mha`` keeps the body in the same file
(ElementDataFile = LOCAL); ``.mhd`` points at a sibling ``.raw``. Header
axis order is x y z (fastest-varying first), matching the raw layout of a
row-major (Z, Y, X) array. Floats are written with repr(), so a round-trip
is bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import HeaderError, IntegrityError

ELEMENT_TYPES = {"MET_FLOAT": np.dtype("<f4"), "MET_UCHAR": np.dtype("u1")}
DTYPE_NAMES = {np.dtype(np.float32): "MET_FLOAT", np.dtype(np.uint8): "MET_UCHAR"}


@dataclass
class Volume:
    """A 3D scalar image; ``spacing`` and ``origin`` are (z, y, x) mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        if self.data.dtype not in DTYPE_NAMES:
            raise ValueError(
                f"volume dtype must be float32 or uint8, got {self.data.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("spacing and origin must have three components")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing
        return sz * sy * sx


def _format_triplet(values) -> str:
    # header order is x y z; repr keeps floats exact across the round-trip
    return " ".join(repr(float(v)) for v in reversed(values))


def write_volume(volume: Volume, path) -> None:
    """Write ``.mha`` (single file) or ``.mhd`` + sibling ``.raw``."""
    path = os.fspath(path)
    single = path.endswith(".mha")
    if not single and not path.endswith(".mhd"):
        raise ValueError(f"volume path must end in .mha or .mhd, got {path!r}")
    z, y, x = volume.data.shape
    body = np.ascontiguousarray(volume.data).tobytes()
    data_file = "LOCAL" if single else os.path.basename(path)[:-4] + ".raw"
    header = (
        "ObjectType = Image\n"
        "NDims = 3\n"
        "BinaryData = True\n"
        "BinaryDataByteOrderMSB = False\n"
        f"DimSize = {x} {y} {z}\n"
        f"ElementSpacing = {_format_triplet(volume.spacing)}\n"
        f"Offset = {_format_triplet(volume.origin)}\n"
        f"ElementType = {DTYPE_NAMES[volume.data.dtype]}\n"
        f"ElementDataFile = {data_file}\n"
    )
    if single:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(body)
    else:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(header)
        with open(os.path.join(os.path.dirname(path) or ".", data_file), "wb") as fh:
            fh.write(body)


def _parse_header(lines) -> tuple[dict, int]:
    """Parse ``Key = Value`` lines until ElementDataFile; returns the fields
    and the 1-based line count consumed."""
    fields = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise HeaderError(f"expected 'Key = Value', got {line!r}", lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise HeaderError("empty header key", lineno)
        if key in fields:
            raise HeaderError(f"duplicate header key {key!r}", lineno)
        fields[key] = (value, lineno)
        if key == "ElementDataFile":
            return fields, lineno
    raise HeaderError("header ended without ElementDataFile",
                      len(lines) if hasattr(lines, "__len__") else None)


def _header_triplet(fields, key, kind, default=None):
    if key not in fields:
        if default is not None:
            return default
        raise HeaderError(f"missing required header key {key!r}")
    value, lineno = fields[key]
    parts = value.split()
    if len(parts) != 3:
        raise HeaderError(f"{key} needs three values, got {value!r}", lineno)
    try:
        parsed = tuple(kind(p) for p in parts)
    except ValueError:
        raise HeaderError(f"{key} has non-{kind.__name__} entries: {value!r}", lineno)
    return tuple(reversed(parsed))  # header x y z -> volume z y x


def read_volume(path) -> Volume:
    """Read a ``.mha`` or ``.mhd``(+``.raw``) volume written by
    ``write_volume`` (or any conforming writer of this subset)."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()

    # the header is ASCII lines; split it off without decoding the body.
    # On EOF without ElementDataFile, fall through to the parser so the
    # first malformed line is what gets reported.
    lines = []
    offset = 0
    while offset < len(blob):
        nl = blob.find(b"\n", offset)
        end = len(blob) if nl < 0 else nl
        try:
            line = blob[offset:end].decode("ascii")
        except UnicodeDecodeError:
            raise HeaderError("non-ASCII bytes inside header", len(lines) + 1)
        lines.append(line)
        offset = end + 1
        if line.split("=")[0].strip() == "ElementDataFile":
            break
    fields, _ = _parse_header(lines)

    def text(key):
        if key not in fields:
            raise HeaderError(f"missing required header key {key!r}")
        return fields[key][0]

    if text("NDims") != "3":
        raise HeaderError(f"only NDims = 3 is supported, got {text('NDims')!r}",
                          fields["NDims"][1])
    if "BinaryDataByteOrderMSB" in fields and text("BinaryDataByteOrderMSB") == "True":
        raise HeaderError("big-endian volumes are not supported",
                          fields["BinaryDataByteOrderMSB"][1])
    elem = text("ElementType")
    if elem not in ELEMENT_TYPES:
        raise HeaderError(
            f"ElementType must be MET_FLOAT or MET_UCHAR, got {elem!r}",
            fields["ElementType"][1])
    dtype = ELEMENT_TYPES[elem]
    dims = _header_triplet(fields, "DimSize", int)
    if any(d < 1 for d in dims):
        raise HeaderError(f"DimSize extents must be positive, got {dims}",
                          fields["DimSize"][1])
    spacing = _header_triplet(fields, "ElementSpacing", float, default=(1.0, 1.0, 1.0))
    origin = _header_triplet(fields, "Offset", float, default=(0.0, 0.0, 0.0))

    data_file = text("ElementDataFile")
    if data_file == "LOCAL":
        body = blob[offset:]
    else:
        raw_path = os.path.join(os.path.dirname(path) or ".", data_file)
        if not os.path.exists(raw_path):
            raise IntegrityError(f"{path}: raw body {data_file!r} not found")
        with open(raw_path, "rb") as fh:
            body = fh.read()

    count = int(np.prod(dims))
    expected = count * dtype.itemsize
    if len(body) != expected:
        raise IntegrityError(
            f"{path}: DimSize {dims[::-1]} implies {expected} body bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=dtype).reshape(dims)
    if dtype == np.dtype("<f4"):
        data = data.astype(np.float32, copy=True)
    else:
        data = data.astype(np.uint8, copy=True)
    return Volume(data=data, spacing=spacing, origin=origin)
