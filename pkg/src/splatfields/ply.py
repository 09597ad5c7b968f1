"""Binary PLY interchange for Gaussian splats (de-facto 3DGS export layout).

Storage is raw: opacity as a logit, scale as a log, color as degree-0
spherical-harmonics coefficients (f_dc_*). Loading applies the activations;
saving inverts them. Values are float32 on disk; activation math runs in
float64 and the inverse nudges raw values by ULPs until re-activating
reproduces the stored field bit-exactly (always possible when the field
value itself came from a raw representation, which holds for every file
this library reads or writes).
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError
from .splats import GaussianSplat

# Degree-0 SH basis constant 1 / (2 sqrt(pi)); color = 0.5 + SH_C0 * f_dc.
SH_C0 = 0.28209479177387814

REQUIRED_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

_PLY_DTYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


@dataclass
class PlyIOReport:
    """Counters for lossy events during PLY I/O."""

    ignored_properties: list = field(default_factory=list)
    clamped_opacities: int = 0
    clamped_colors: int = 0
    zero_quaternions: int = 0


def _sigmoid64(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _snap_inverse(target: np.ndarray, forward64, inverse64, max_nudges: int = 4) -> np.ndarray:
    """Find float32 raw values whose float64 activation rounds back to `target`.

    `forward64` must be increasing. Starts from the rounded analytic inverse
    and nudges by single ULPs; values with no exact float32 preimage keep the
    nearest representable raw.
    """
    target = np.asarray(target, dtype=np.float32)
    raw = inverse64(target.astype(np.float64)).astype(np.float32)
    for _ in range(max_nudges):
        act = forward64(raw.astype(np.float64)).astype(np.float32)
        bad = act != target
        if not bad.any():
            break
        toward = np.where(act[bad] < target[bad], np.float32(np.inf), np.float32(-np.inf))
        raw[bad] = np.nextafter(raw[bad], toward)
    return raw


def fields_from_raw(raw: dict, report: PlyIOReport | None = None) -> dict:
    """Activate raw PLY columns into splat fields (all float32).

    raw keys: centers (N,3), f_dc (N,3), opacity (N,), log_scale (N,3), rot (N,4).
    """
    report = report if report is not None else PlyIOReport()
    opac = _sigmoid64(raw["opacity"]).astype(np.float32)
    scales = np.exp(raw["log_scale"].astype(np.float64)).astype(np.float32)
    colors = (0.5 + SH_C0 * raw["f_dc"].astype(np.float64)).astype(np.float32)
    out_of_range = (colors < 0) | (colors > 1)
    if out_of_range.any():
        report.clamped_colors += int(out_of_range.sum())
        colors = np.clip(colors, 0.0, 1.0)
    rot = raw["rot"].astype(np.float32).copy()
    norms = np.linalg.norm(rot.astype(np.float64), axis=1)
    zero = norms < 1e-12
    if zero.any():
        report.zero_quaternions += int(zero.sum())
        warnings.warn(f"{int(zero.sum())} zero quaternion(s) replaced by identity")
        rot[zero] = np.array([1, 0, 0, 0], dtype=np.float32)
        norms[zero] = 1.0
    denorm = np.abs(norms - 1.0) > 1e-6
    if denorm.any():
        rot[denorm] = (rot[denorm].astype(np.float64) / norms[denorm, None]).astype(np.float32)
    return {
        "centers": raw["centers"].astype(np.float32),
        "rotations": rot,
        "scales": scales,
        "opacities": opac,
        "colors": colors,
    }


def _parse_header(f) -> tuple[int, list[tuple[str, str]], int]:
    """Returns (vertex count, [(name, ply type)], header byte length)."""
    magic = f.readline()
    if magic.strip() != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")
    fmt = f.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise FormatError(f"unsupported PLY format line: {fmt.decode(errors='replace')!r}")
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = f.readline()
        if not line:
            raise FormatError("unexpected end of file inside PLY header")
        tokens = line.strip().decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
            elif count is None:
                raise FormatError(f"unsupported leading element '{tokens[1]}' before vertex")
        elif tokens[0] == "property":
            if not in_vertex:
                continue
            if tokens[1] == "list":
                raise FormatError("list properties are not supported in vertex element")
            if tokens[1] not in _PLY_DTYPES:
                raise FormatError(f"unsupported property type '{tokens[1]}'")
            props.append((tokens[2], tokens[1]))
        elif tokens[0] == "end_header":
            break
    if count is None:
        raise FormatError("PLY header has no vertex element")
    return count, props, f.tell()


def _read_vertex_table(path) -> tuple[int, list[str], np.ndarray]:
    with open(path, "rb") as f:
        count, props, _ = _parse_header(f)
        dtype = np.dtype([(name, _PLY_DTYPES[t]) for name, t in props])
        data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype, count=count)
    return count, [name for name, _ in props], data


def load_ply(path, report: PlyIOReport | None = None) -> GaussianSplat:
    """Read a 3DGS PLY file and return the splat with activations applied."""
    report = report if report is not None else PlyIOReport()
    count, names, data = _read_vertex_table(path)
    for prop in REQUIRED_PROPERTIES:
        if prop not in names:
            raise FormatError(f"missing vertex property '{prop}'")
    extra = [n for n in names if n not in REQUIRED_PROPERTIES]
    if extra:
        report.ignored_properties.extend(extra)
        if any(n.startswith("f_rest_") for n in extra):
            warnings.warn("f_rest properties present; higher-order SH ignored")

    def col(*keys):
        return np.stack([np.asarray(data[k], dtype=np.float32) for k in keys], axis=1)

    raw = {
        "centers": col("x", "y", "z"),
        "f_dc": col("f_dc_0", "f_dc_1", "f_dc_2"),
        "opacity": np.asarray(data["opacity"], dtype=np.float32),
        "log_scale": col("scale_0", "scale_1", "scale_2"),
        "rot": col("rot_0", "rot_1", "rot_2", "rot_3"),
    }
    for prop in REQUIRED_PROPERTIES:
        column = np.asarray(data[prop], dtype=np.float64)
        finite = np.isfinite(column)
        if not finite.all():
            raise DataError(f"non-finite value in property '{prop}' at vertex "
                            f"{int(np.nonzero(~finite)[0][0])}")
    fields = fields_from_raw(raw, report)
    return GaussianSplat(**fields)


def save_ply(splat: GaussianSplat, path, report: PlyIOReport | None = None) -> None:
    """Write a splat as a 3DGS PLY file (raw logit opacity, log scale, f_dc color).

    Opacities at exactly 0 or 1 are clamped to [1e-6, 1 - 1e-6] before the
    logit; the clamp count lands in the report. The write is atomic
    (temp file + rename).
    """
    report = report if report is not None else PlyIOReport()
    n = splat.count
    opac = splat.opacities.astype(np.float64)
    clamped = (opac < 1e-6) | (opac > 1.0 - 1e-6)
    if clamped.any():
        report.clamped_opacities += int(clamped.sum())
        opac = np.clip(opac, 1e-6, 1.0 - 1e-6)

    raw_opacity = _snap_inverse(opac.astype(np.float32), _sigmoid64,
                                lambda p: np.log(p) - np.log1p(-p))
    raw_scale = _snap_inverse(splat.scales, np.exp, np.log)
    f_dc = _snap_inverse(splat.colors, lambda r: 0.5 + SH_C0 * r,
                         lambda c: (c - 0.5) / SH_C0)

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in REQUIRED_PROPERTIES]
    header.append("end_header")

    dtype = np.dtype([(p, "<f4") for p in REQUIRED_PROPERTIES])
    table = np.empty(n, dtype=dtype)
    for i, axis in enumerate("xyz"):
        table[axis] = splat.centers[:, i]
    for i in range(3):
        table[f"f_dc_{i}"] = f_dc[:, i]
        table[f"scale_{i}"] = raw_scale[:, i]
    table["opacity"] = raw_opacity
    for i in range(4):
        table[f"rot_{i}"] = splat.rotations[:, i]

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(table.tobytes())
    os.replace(tmp, path)


def load_ply_points(path) -> np.ndarray:
    """Read only x, y, z from any vertex PLY (for bare point-cloud inputs)."""
    _, names, data = _read_vertex_table(path)
    for prop in ("x", "y", "z"):
        if prop not in names:
            raise FormatError(f"missing vertex property '{prop}'")
    pts = np.stack([np.asarray(data[k], dtype=np.float32) for k in "xyz"], axis=1)
    if not np.isfinite(pts).all():
        raise DataError(f"non-finite coordinate at vertex "
                        f"{int(np.argwhere(~np.isfinite(pts))[0][0])}")
    return pts
