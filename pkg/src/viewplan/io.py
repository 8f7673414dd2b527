"""ASCII PLY for point clouds and splat models, binary PPM for images."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import IoFailure, ParseError, SchemaError
from .geometry import PointCloud
from .splats import SplatModel

EXTERNAL = "external"
SH_C0 = 0.28209479177387814

_INT_TYPES = {"char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8",
              "int16", "uint16", "int32", "uint32"}
_FLOAT_TYPES = {"float", "double", "float32", "float64"}
_CLOUD_PROPS = ("x", "y", "z", "red", "green", "blue")
_SPLAT_PROPS = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")


def _read_text(path) -> List[str]:
    try:
        return Path(path).read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="ascii")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def parse_ply(lines: List[str]) -> Tuple[Dict[str, str], np.ndarray]:
    """Parse an ASCII PLY; returns vertex property types and an (n, k) table.

    Elements other than ``vertex`` are skipped.
    """
    if not lines or lines[0].strip() != "ply":
        raise ParseError("expected 'ply' magic", 1)
    elements: List[Tuple[str, int, List[Tuple[str, str]]]] = []
    fmt = None
    ln = 1
    body_start = None
    for ln in range(2, len(lines) + 1):
        tok = lines[ln - 1].split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise ParseError("malformed format line", ln)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError("malformed element line", ln)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", ln)
            if tok[1] == "list":
                if len(tok) != 5:
                    raise ParseError("malformed list property", ln)
                elements[-1][2].append((tok[4], "list"))
            elif len(tok) == 3 and tok[1] in _INT_TYPES | _FLOAT_TYPES:
                elements[-1][2].append((tok[2], tok[1]))
            else:
                raise ParseError(f"unsupported property declaration {' '.join(tok[1:])!r}", ln)
        elif tok[0] == "end_header":
            body_start = ln
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", ln)
    if body_start is None:
        raise ParseError("missing end_header", ln)
    if fmt != "ascii":
        raise ParseError(f"only ascii PLY is supported, got {fmt!r}", 2)
    pos = body_start
    table = None
    types: Dict[str, str] = {}
    for name, count, props in elements:
        if name != "vertex":
            pos += count
            continue
        if any(t == "list" for _, t in props):
            raise ParseError("list properties on vertices are not supported", body_start)
        types = dict(props)
        table = np.empty((count, len(props)))
        for i in range(count):
            ln = pos + i + 1
            if ln > len(lines):
                raise ParseError(f"expected {count} vertices, file ends after {i}", len(lines))
            tok = lines[ln - 1].split()
            if len(tok) != len(props):
                raise ParseError(f"expected {len(props)} values, found {len(tok)}", ln)
            try:
                row = [float(t) for t in tok]
            except ValueError as exc:
                raise ParseError(f"non-numeric value: {exc}", ln) from None
            for (pname, ptype), v in zip(props, row):
                if ptype in _INT_TYPES and v != int(v):
                    raise ParseError(f"property {pname} is integer-typed but got {v}", ln)
            table[i] = row
        pos += count
    if table is None:
        raise SchemaError(["element vertex"])
    return types, table


def _columns(types: Dict[str, str], table: np.ndarray, wanted) -> Dict[str, np.ndarray]:
    missing = [p for p in wanted if p not in types]
    if missing:
        raise SchemaError(missing)
    names = list(types)
    return {p: table[:, names.index(p)] for p in wanted}


def read_point_cloud(path) -> PointCloud:
    """Read an ASCII PLY with x, y, z and red, green, blue per vertex.

    Integer colors are taken as 8-bit, float colors as already in [0, 1].
    Every point is marked as externally produced.
    """
    lines = _read_text(path)
    types, table = parse_ply(lines)
    col = _columns(types, table, _CLOUD_PROPS)
    pos = np.stack([col["x"], col["y"], col["z"]], axis=1)
    rgb = np.stack([col["red"], col["green"], col["blue"]], axis=1)
    if types["red"] in _INT_TYPES:
        rgb = rgb / 255.0
    if len(rgb) and (rgb.min() < 0 or rgb.max() > 1):
        raise ParseError("color values out of range")
    if not np.all(np.isfinite(pos)):
        raise ParseError("non-finite vertex position")
    prov = tuple(frozenset({EXTERNAL}) for _ in range(len(pos)))
    return PointCloud(pos, rgb, prov)


def write_point_cloud(path, pc: PointCloud) -> None:
    """Write ``pc`` as ASCII PLY with double positions and 8-bit colors."""
    head = ["ply", "format ascii 1.0", f"element vertex {len(pc)}",
            "property double x", "property double y", "property double z",
            "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    rgb = np.rint(pc.colors * 255).astype(int)
    rows = [f"{x!r} {y!r} {z!r} {r} {g} {b}"
            for (x, y, z), (r, g, b) in zip(pc.positions.tolist(), rgb.tolist())]
    _write_text(path, "\n".join(head + rows) + "\n")


def write_splats(path, model: SplatModel) -> None:
    """Write a splat model in the common viewer layout.

    Colors go to the DC spherical-harmonic band, opacity as a logit and
    scales as logs.
    """
    head = ["ply", "format ascii 1.0", f"element vertex {len(model)}"]
    head += [f"property float {p}" for p in _SPLAT_PROPS] + ["end_header"]
    op = np.clip(model.opacities, 1e-12, 1 - 1e-12)
    table = np.column_stack([
        model.means, np.zeros((len(model), 3)), (model.colors - 0.5) / SH_C0,
        np.log(op) - np.log1p(-op), np.log(model.scales), model.quats,
    ])
    rows = [" ".join(repr(v) for v in r) for r in table.tolist()]
    _write_text(path, "\n".join(head + rows) + "\n")


def read_splats(path, background=(0.0, 0.0, 0.0)) -> SplatModel:
    types, table = parse_ply(_read_text(path))
    col = _columns(types, table, [p for p in _SPLAT_PROPS if not p.startswith("n")])
    means = np.stack([col[p] for p in ("x", "y", "z")], axis=1)
    colors = np.clip(np.stack([col[f"f_dc_{i}"] for i in range(3)], axis=1) * SH_C0 + 0.5, 0, 1)
    opac = 1 / (1 + np.exp(-col["opacity"]))
    scales = np.exp(np.stack([col[f"scale_{i}"] for i in range(3)], axis=1))
    q = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    return SplatModel(means, q, scales, opac, colors, background)


def write_ppm(path, image) -> None:
    """Write an ``(H, W, 3)`` image in [0, 1] as 8-bit binary PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise IoFailure(f"expected an (H, W, 3) image, got shape {img.shape}")
    data = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    fields: List[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.find(b"\n", pos) + 1 or len(raw)
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ParseError("truncated PPM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ParseError("expected P6 magic", 1)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ParseError("malformed PPM header") from None
    if maxval != 255:
        raise ParseError(f"only 8-bit PPM is supported, maxval {maxval}")
    pos += 1
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ParseError("PPM pixel data truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0
