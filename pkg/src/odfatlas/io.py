"""File formats: OFV ODF fields, MOMV momentum fields, run configs, CSV and SVG.

All binary containers are little-endian. Voxel payloads are float32 with x
varying fastest, then y, then z; for OFV the K sphere values of a voxel are
contiguous.
"""
import csv
import dataclasses
import struct
from pathlib import Path

import numpy as np

from .atlas import DIAGNOSTIC_COLUMNS, AtlasConfig
from .diffeo import Lattice3, VectorField3
from .errors import FormatError, InvalidArgumentError, ValidationError
from .sphere import SphereGrid
from .synth import CohortSpec
from .transport import OdfField

OFV_MAGIC = b"ODFV"
MOMV_MAGIC = b"MOMV"
VERSION = 1
# tolerance for the unit-norm check of float32 payloads
F32_NORM_TOL = 1e-5


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=len(self.data))
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def array(self, dtype, count, what):
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt, count=count)


def _header(r, magic):
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)
    (version,) = r.unpack("I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    dims = r.unpack("3I", "dims")
    spacing = r.unpack("3d", "spacing")
    try:
        lattice = Lattice3(dims, spacing)
    except InvalidArgumentError as e:
        raise FormatError(f"invalid lattice: {e}", offset=8) from e
    return lattice


def _to_file_order(a):
    # (nx, ny, nz, C) -> z slowest, x fastest
    return np.ascontiguousarray(np.swapaxes(a, 0, 2))


def _from_file_order(flat, dims, C):
    nx, ny, nz = dims
    return np.swapaxes(flat.reshape(nz, ny, nx, C), 0, 2)


def _canonical_f32(values, qw):
    """float32 values that are a fixed point of read (reproject) then write."""
    v32 = values.astype("<f4")
    for _ in range(4):
        back = _reproject(v32.astype(np.float64), qw).astype("<f4")
        if np.array_equal(back, v32):
            break
        v32 = back
    return v32


def _reproject(v, qw):
    n = np.sqrt(np.einsum("...k,...k,k->...", v, v, qw))
    return v / n[..., None]


def write_ofv(field, path):
    g = field.grid
    head = [OFV_MAGIC, struct.pack("<I", VERSION), struct.pack("<3I", *field.lattice.dims),
            struct.pack("<3d", *field.lattice.spacing), struct.pack("<I", g.K),
            struct.pack("<B", int(g.antipodal_symmetric)),
            np.ascontiguousarray(g.directions, dtype="<f8").tobytes(),
            np.ascontiguousarray(g.weights, dtype="<f8").tobytes(), struct.pack("<B", 1)]
    payload = _canonical_f32(field.values, g.quad_weights)
    mask = _to_file_order(field.mask[..., None]).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"".join(head))
        f.write(_to_file_order(payload).tobytes())
        f.write(mask.tobytes())


def read_ofv(path):
    """Read an OFV file; foreground ODFs are reprojected to unit norm in float64."""
    r = _Reader(Path(path).read_bytes())
    lattice = _header(r, OFV_MAGIC)
    (K,) = r.unpack("I", "K")
    (anti,) = r.unpack("B", "antipodal flag")
    dirs = r.array("f8", 3 * K, "directions").reshape(K, 3)
    weights = r.array("f8", K, "weights")
    try:
        grid = SphereGrid(dirs.copy(), weights.copy(), bool(anti))
    except InvalidArgumentError as e:
        raise ValidationError(f"invalid sphere grid in header: {e}") from e
    (has_mask,) = r.unpack("B", "mask flag")
    n = lattice.n_voxels
    vals = _from_file_order(r.array("f4", n * K, "payload"), lattice.dims, K).astype(np.float64)
    if has_mask:
        mask = _from_file_order(r.array("u1", n, "mask"), lattice.dims, 1)[..., 0] != 0
    else:
        mask = np.ones(lattice.dims, dtype=bool)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after payload", offset=r.pos)
    fg = vals[mask]
    norms = np.sqrt(np.einsum("mk,mk,k->m", fg, fg, grid.quad_weights))
    bad = ~np.isfinite(norms) | np.any(fg < 0, axis=-1) | (np.abs(norms - 1.0) > F32_NORM_TOL)
    if np.any(bad):
        vox = tuple(int(i) for i in np.argwhere(mask)[np.flatnonzero(bad)[0]])
        raise ValidationError(f"voxel {vox} does not hold a valid square-root ODF")
    vals[mask] = fg / norms[:, None]
    return OdfField(lattice, grid, vals, mask)


def ofv_payload_offset(dims, K):
    """Byte offset of the first payload value in an OFV file."""
    return 4 + 4 + 12 + 24 + 4 + 1 + 24 * K + 8 * K + 1


def write_momv(m0, path):
    lat = m0.lattice
    with open(path, "wb") as f:
        f.write(MOMV_MAGIC + struct.pack("<I", VERSION) + struct.pack("<3I", *lat.dims)
                + struct.pack("<3d", *lat.spacing))
        f.write(_to_file_order(m0.values.astype("<f4")).tobytes())


def read_momv(path):
    r = _Reader(Path(path).read_bytes())
    lattice = _header(r, MOMV_MAGIC)
    vals = _from_file_order(r.array("f4", lattice.n_voxels * 3, "payload"), lattice.dims, 3)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after payload", offset=r.pos)
    try:
        return VectorField3(lattice, vals.astype(np.float64))
    except InvalidArgumentError as e:
        raise ValidationError(str(e)) from e


def read_weight_map(path, lattice):
    """Raw little-endian float64 scalar map, x fastest."""
    data = Path(path).read_bytes()
    need = 8 * lattice.n_voxels
    if len(data) != need:
        raise FormatError(f"weight map has {len(data)} bytes, expected {need}", offset=min(len(data), need))
    flat = np.frombuffer(data, dtype="<f8")
    return _from_file_order(flat, lattice.dims, 1)[..., 0].copy()


def write_weight_map(w, path):
    Path(path).write_bytes(_to_file_order(np.asarray(w, dtype="<f8")[..., None]).tobytes())


# -- run configs ---------------------------------------------------------------

def _config_fields():
    out = {}
    for cls in (CohortSpec, AtlasConfig):
        for f in dataclasses.fields(cls):
            out.setdefault(f.name, f)
    return out


def _parse_value(name, default, text):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
            kind = type(default[0])
            return tuple(kind(p) for p in parts)
        return text
    except ValueError as e:
        raise ValidationError(f"config key {name!r}: cannot parse {text!r}") from e


def read_run_config(path):
    """Parse ``key = value`` lines; returns ``(CohortSpec, AtlasConfig)``.

    Keys are the fields of both dataclasses; unknown keys are rejected.
    """
    fields = _config_fields()
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, fields[key].default, val)
    return build_configs(values)


def build_configs(values):
    def pick(cls):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    try:
        return pick(CohortSpec), pick(AtlasConfig)
    except (TypeError, InvalidArgumentError) as e:
        raise ValidationError(f"invalid configuration: {e}") from e


def write_run_config(spec, cfg, path):
    lines = []
    seen = set()
    for obj in (spec, cfg):
        for f in dataclasses.fields(obj):
            if f.name in seen:
                continue
            seen.add(f.name)
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- CSV and SVG -----------------------------------------------------------------

def write_diagnostics_csv(diagnostics, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DIAGNOSTIC_COLUMNS)
        for d in diagnostics:
            w.writerow([repr(x) for x in d.row()])


def read_diagnostics_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != DIAGNOSTIC_COLUMNS:
        raise ValidationError(f"{path}: expected columns {','.join(DIAGNOSTIC_COLUMNS)}")
    try:
        return [dict(zip(DIAGNOSTIC_COLUMNS, (int(r[0]),) + tuple(float(x) for x in r[1:]))) for r in rows[1:]]
    except (ValueError, IndexError) as e:
        raise ValidationError(f"{path}: malformed row") from e


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("iteration", "prior", "data", "total"))
        for it, p, d in trace:
            w.writerow((it, repr(p), repr(d), repr(p + d)))


def plot_svg(rows, path, width=480, height=320):
    """Mean metric per iteration with +-1 std error bars, as a standalone SVG."""
    if not rows:
        raise ValidationError("nothing to plot")
    it = np.array([r["iteration"] for r in rows], dtype=float)
    mu = np.array([r["mean_metric"] for r in rows])
    sd = np.array([r["std_metric"] for r in rows])
    pad = 48
    x0, x1 = it.min() - 0.5, it.max() + 0.5
    y0, y1 = min(0.0, float((mu - sd).min())), float((mu + sd).max()) or 1.0
    y1 += 0.05 * (y1 - y0)

    def X(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def Y(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">EM iteration</text>',
             f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {height / 2})">mean diffeomorphic metric</text>']
    for i in it:
        parts.append(f'<text x="{X(i):.1f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{int(i)}</text>')
    for v in np.linspace(y0, y1, 5):
        parts.append(f'<text x="{pad - 4}" y="{Y(v) + 3:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    pts = " ".join(f"{X(a):.1f},{Y(b):.1f}" for a, b in zip(it, mu))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>')
    for a, b, s in zip(it, mu, sd):
        parts.append(f'<line x1="{X(a):.1f}" y1="{Y(b - s):.1f}" x2="{X(a):.1f}" y2="{Y(b + s):.1f}" stroke="black"/>')
        parts.append(f'<circle cx="{X(a):.1f}" cy="{Y(b):.1f}" r="3" fill="steelblue"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
