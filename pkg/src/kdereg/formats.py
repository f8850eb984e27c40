"""Readers and writers for the on-disk formats used by the CLI.

* PLY point clouds, ASCII or binary little-endian, float32 x/y/z with
  optional uchar red/green/blue.
* Rigid transforms as a JSON array of 16 row-major numbers.
* Camera models as JSON (intrinsics, 16-number extrinsics, depth scale).
* 16-bit depth and 8-bit mask images as binary PGM or PNG.
* Correspondence CSV (six coordinates, optional seventh weight column) and
  weight CSV (one value per row).

Parse failures raise :class:`FormatError` with the byte offset.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from .backprojection import CameraModel, DepthImage, Intrinsics, MaskImage
from .exceptions import FormatError, InputError
from .geometry import CorrespondenceSet, PointCloud, RigidTransform


def fmt(value: float) -> str:
    """17 significant digits: enough to round-trip any float64."""
    return f"{float(value):.17g}"


# -- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes, path):
    if not data.startswith(b"ply"):
        raise FormatError(path, 0, "missing 'ply' magic")
    end = data.find(b"end_header")
    if end < 0:
        raise FormatError(path, len(data), "header has no end_header line")
    body = data.index(b"\n", end) + 1
    fmt_name = None
    elements = []  # [name, count, [(prop, dtype)]]
    offset = 0
    for raw in data[:body].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        tokens = line.split()
        if tokens:
            key = tokens[0]
            if key == "format":
                fmt_name = tokens[1] if len(tokens) > 1 else None
            elif key == "element":
                if len(tokens) != 3 or not tokens[2].isdigit():
                    raise FormatError(path, offset, f"bad element line '{line}'")
                elements.append([tokens[1], int(tokens[2]), []])
            elif key == "property":
                if not elements:
                    raise FormatError(path, offset, "property before any element")
                if tokens[1] == "list":
                    raise FormatError(path, offset, "list properties are not supported")
                if tokens[1] not in _PLY_TYPES or len(tokens) != 3:
                    raise FormatError(path, offset, f"bad property line '{line}'")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        offset += len(raw) + 1
    if fmt_name not in ("ascii", "binary_little_endian"):
        raise FormatError(path, 0, f"unsupported PLY format '{fmt_name}'")
    return fmt_name, elements, body


def read_ply(path) -> PointCloud:
    """Read the ``vertex`` element of a PLY file."""
    path = Path(path)
    data = path.read_bytes()
    fmt_name, elements, offset = _parse_ply_header(data, path)
    cloud = None
    for name, count, props in elements:
        names = [p for p, _ in props]
        if fmt_name == "binary_little_endian":
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            need = dtype.itemsize * count
            if offset + need > len(data):
                raise FormatError(path, len(data), f"truncated '{name}' element")
            rows = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            offset += need
            cols = {p: rows[p] for p in names}
        else:
            table = []
            for _ in range(count):
                nl = data.find(b"\n", offset)
                nl = len(data) if nl < 0 else nl
                fields = data[offset:nl].split()
                if len(fields) != len(props):
                    raise FormatError(
                        path, offset, f"expected {len(props)} values, got {len(fields)}"
                    )
                try:
                    table.append([float(f) for f in fields])
                except ValueError as exc:
                    raise FormatError(path, offset, str(exc)) from None
                offset = nl + 1
            arr = np.array(table, dtype=np.float64).reshape(count, len(props))
            cols = {p: arr[:, i] for i, p in enumerate(names)}
        if name == "vertex":
            if not {"x", "y", "z"} <= set(names):
                raise FormatError(path, 0, "vertex element lacks x/y/z")
            pts = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(np.float64)
            colors = None
            if {"red", "green", "blue"} <= set(names):
                colors = np.column_stack([cols["red"], cols["green"], cols["blue"]])
            cloud = PointCloud(pts, colors)
    if cloud is None:
        raise FormatError(path, 0, "no vertex element")
    return cloud


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    """Write float32 coordinates, plus uchar colors when the cloud has them."""
    n = len(cloud)
    colored = cloud.colors is not None
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colored:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    pts = cloud.points.astype(np.float32)
    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if colored:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rows = np.empty(n, dtype=fields)
        rows["x"], rows["y"], rows["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
        if colored:
            rows["red"], rows["green"], rows["blue"] = cloud.colors.T
        body = rows.tobytes()
    else:
        lines = []
        for i in range(n):
            line = " ".join(repr(float(v)) for v in pts[i])
            if colored:
                line += " " + " ".join(str(int(c)) for c in cloud.colors[i])
            lines.append(line)
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    Path(path).write_bytes(head + body)


# -- JSON ------------------------------------------------------------------

def _load_json(path):
    path = Path(path)
    text = path.read_bytes()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.pos, exc.msg) from None


def transform_to_json(transform: RigidTransform) -> str:
    return "[" + ", ".join(fmt(v) for v in transform.matrix.reshape(-1)) + "]\n"


def write_transform(path, transform: RigidTransform) -> None:
    Path(path).write_text(transform_to_json(transform))


def _matrix_from(obj, path, what="transform"):
    if isinstance(obj, dict):
        obj = obj.get("matrix")
    arr = np.asarray(obj, dtype=np.float64) if obj is not None else None
    if arr is None or arr.size != 16:
        raise FormatError(path, 0, f"{what} must be 16 row-major numbers")
    return arr.reshape(4, 4)


def read_transform(path) -> RigidTransform:
    obj = _load_json(path)
    try:
        return RigidTransform.from_matrix(_matrix_from(obj, path))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(path, 0, str(exc)) from None


def _intrinsics(obj, key, path) -> Intrinsics:
    try:
        k = obj[key]
        return Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]))
    except (KeyError, TypeError, ValueError):
        raise FormatError(path, 0, f"'{key}' needs numeric fx, fy, cx, cy") from None


def read_camera(path) -> CameraModel:
    obj = _load_json(path)
    if not isinstance(obj, dict):
        raise FormatError(path, 0, "camera file must hold a JSON object")
    depth_k = _intrinsics(obj, "depth_intrinsics", path)
    color_k = _intrinsics(obj, "color_intrinsics", path)
    ext = obj.get("extrinsics")
    try:
        extrinsics = (
            RigidTransform.identity() if ext is None
            else RigidTransform.from_matrix(_matrix_from(ext, path, "extrinsics"))
        )
    except InputError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(path, 0, f"extrinsics: {exc}") from None
    scale = float(obj.get("depth_scale", 0.001))
    for k in (depth_k, color_k):
        if k.fx <= 0 or k.fy <= 0:
            raise FormatError(path, 0, "focal lengths must be positive")
    return CameraModel(depth_k, color_k, extrinsics, scale)


def write_camera(path, camera: CameraModel) -> None:
    def k(i):
        return {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy}

    obj = {
        "depth_intrinsics": k(camera.depth_intrinsics),
        "color_intrinsics": k(camera.color_intrinsics),
        "extrinsics": camera.extrinsics.matrix.reshape(-1).tolist(),
        "depth_scale": camera.depth_scale,
    }
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


# -- images ----------------------------------------------------------------

def _pgm_token(data: bytes, pos: int, path):
    """Next whitespace-delimited header token, skipping comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(path, start, "unexpected end of PGM header")
    return data[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM; 16-bit samples are big-endian."""
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise FormatError(path, 0, "not a binary PGM (expected P5 magic)")
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _pgm_token(data, pos, path)
        if not tok.isdigit():
            raise FormatError(path, start, f"bad PGM header value {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise FormatError(path, pos, f"PGM maxval {maxval} out of range")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(path, len(data), f"PGM raster truncated: need {need} bytes")
    arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return arr.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path, values: np.ndarray, sixteen_bit: bool | None = None) -> None:
    v = np.asarray(values)
    if sixteen_bit is None:
        sixteen_bit = v.dtype != np.uint8
    maxval = 65535 if sixteen_bit else 255
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n{maxval}\n".encode("ascii")
    raster = v.astype(">u2" if sixteen_bit else "u1").tobytes()
    Path(path).write_bytes(header + raster)


def _read_png(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            arr = np.array(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(path, 0, f"cannot decode PNG: {exc}") from None
    if arr.ndim != 2:
        raise FormatError(path, 0, "expected a single-channel image")
    return arr


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        return _read_png(path)
    return read_pgm(path)


def write_image(path, values: np.ndarray, sixteen_bit: bool | None = None) -> None:
    path = Path(path)
    v = np.asarray(values)
    if sixteen_bit is None:
        sixteen_bit = v.dtype != np.uint8
    if path.suffix.lower() == ".png":
        from PIL import Image

        if sixteen_bit:
            Image.fromarray(v.astype(np.uint16)).save(path)
        else:
            Image.fromarray(v.astype(np.uint8), mode="L").save(path)
    else:
        write_pgm(path, v, sixteen_bit)


def read_depth(path, depth_scale: float = 0.001) -> DepthImage:
    return DepthImage(read_image(path).astype(np.uint16), depth_scale)


def read_mask(path) -> MaskImage:
    return MaskImage(read_image(path))


# -- CSV -------------------------------------------------------------------

def _csv_rows(path):
    """Yield ``(byte_offset, fields)`` for non-empty, non-comment lines."""
    path = Path(path)
    data = path.read_bytes()
    offset = 0
    for raw in data.split(b"\n"):
        line = raw.strip()
        if line and not line.startswith(b"#"):
            yield offset, [f.strip() for f in line.decode("utf-8", "replace").split(",")]
        offset += len(raw) + 1


def _numeric_table(path, widths):
    rows = []
    width = None
    for offset, fields in _csv_rows(path):
        try:
            values = [float(f) for f in fields]
        except ValueError:
            if not rows and width is None:
                continue  # header line
            raise FormatError(path, offset, f"non-numeric value in {fields}") from None
        if width is None:
            if len(values) not in widths:
                raise FormatError(
                    path, offset, f"expected {' or '.join(map(str, widths))} columns, got {len(values)}"
                )
            width = len(values)
        elif len(values) != width:
            raise FormatError(path, offset, f"expected {width} columns, got {len(values)}")
        rows.append(values)
    if not rows:
        raise FormatError(path, 0, "no data rows")
    return np.array(rows, dtype=np.float64)


CORRESPONDENCE_HEADER = "x_t,y_t,z_t,x_prev,y_prev,z_prev"


def read_correspondences(path) -> tuple[CorrespondenceSet, bool]:
    """Correspondences plus whether the file carried a weight column.

    Columns are the current-view point then the previous-view point; the
    previous view is the source that gets moved onto the current one.
    """
    table = _numeric_table(path, (6, 7))
    has_weights = table.shape[1] == 7
    try:
        cs = CorrespondenceSet(table[:, 3:6], table[:, 0:3], table[:, 6] if has_weights else None)
    except InputError as exc:
        raise FormatError(path, 0, str(exc)) from None
    return cs, has_weights


def write_correspondences(path, cs: CorrespondenceSet, with_weights: bool = False) -> None:
    header = CORRESPONDENCE_HEADER + (",weight" if with_weights else "")
    lines = [header]
    for i in range(len(cs)):
        vals = list(cs.target[i]) + list(cs.source[i])
        if with_weights:
            vals.append(cs.weights[i])
        lines.append(",".join(fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_weights(path) -> np.ndarray:
    return _numeric_table(path, (1,))[:, 0]


def write_weights(path, weights) -> None:
    text = "".join(fmt(w) + "\n" for w in np.asarray(weights).reshape(-1))
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def read_pixel_matches(path) -> tuple[np.ndarray, np.ndarray]:
    """Matched keypoints ``u_t, v_t, u_prev, v_prev`` per row."""
    table = _numeric_table(path, (4,))
    return table[:, 0:2], table[:, 2:4]
