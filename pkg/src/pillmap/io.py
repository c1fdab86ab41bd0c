"""
Field and pill-table input/output.

Image-like files (CSV fields and PGM) store the top row first, i.e. the
row of largest y; in memory row 0 is the bottom row.  Readers and writers
flip accordingly.
"""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path

import numpy as np

from .aggregation import AggregatorSpec
from .grid import DesignVector, GridSpec, evaluate_design
from .objective import TargetField
from .transition import TransitionSpec

PILL_HEADER = ["id", "px", "py", "qx", "qy", "r"]

# ground truth of the synthetic five-bar target on [0, 2] x [0, 1]
FIVE_BAR = np.array([
    [0.10, 0.10, 1.00, 0.85, 0.06],
    [1.90, 0.10, 1.00, 0.85, 0.06],
    [1.00, 0.15, 1.00, 0.85, 0.05],
    [0.30, 0.85, 1.70, 0.85, 0.05],
    [0.50, 0.15, 1.50, 0.15, 0.05],
])


class FormatError(ValueError):
    """Malformed input file; the message names the offending position."""


def fmt(v: float) -> str:
    """Shortest-safe decimal text: 17 significant digits round-trip a double."""
    return format(float(v), ".17g")


# ------------------------------------------------------------------ fields


def read_field_csv(path) -> np.ndarray:
    """Read a CSV field (top row first) into an array with row 0 at the bottom."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise FormatError(f"{path}: line {lineno}: row has {len(vals)} values, expected {width}")
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: empty field file")
    a = np.array(rows[::-1], dtype=float)
    if not np.all(np.isfinite(a)):
        raise FormatError(f"{path}: non-finite values")
    return a


def write_field_csv(path, values) -> None:
    v = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        for row in v[::-1]:
            fh.write(",".join(fmt(x) for x in row) + "\n")


def _pgm_tokens(data: bytes, start: int, count: int, path):
    """Read ``count`` whitespace-separated ASCII integers, skipping comments."""
    out = []
    i = start
    n = len(data)
    while len(out) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise FormatError(f"{path}: byte {i}: unexpected end of header/data")
        try:
            out.append(int(data[i:j]))
        except ValueError:
            raise FormatError(f"{path}: byte {i}: expected an integer, got {data[i:j]!r}") from None
        i = j
    return out, i


def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 PGM with maxval 255 as densities gray/255 (row 0 bottom)."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"{path}: byte 0: not a P2/P5 PGM file")
    (w, h, maxval), pos = _pgm_tokens(data, 2, 3, path)
    if w < 1 or h < 1:
        raise FormatError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (expected 255)")
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        raw = data[pos : pos + w * h]
        if len(raw) != w * h:
            raise FormatError(f"{path}: byte {pos + len(raw)}: expected {w * h} pixel bytes, got {len(raw)}")
        pix = np.frombuffer(raw, dtype=np.uint8).astype(float)
    else:
        vals, _ = _pgm_tokens(data, pos, w * h, path)
        pix = np.array(vals, dtype=float)
        if np.any(pix > 255) or np.any(pix < 0):
            raise FormatError(f"{path}: pixel values outside [0, 255]")
    return pix.reshape(h, w)[::-1] / 255.0


def quantize(values, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Map ``[lo, hi]`` affinely to bytes, clamping and rounding half up."""
    v = (np.clip(np.asarray(values, dtype=float), lo, hi) - lo) / (hi - lo)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_pgm(path, values, lo: float = 0.0, hi: float = 1.0) -> None:
    """Write a binary P5 PGM (top row first) of ``values`` mapped from ``[lo, hi]``."""
    q = quantize(values, lo, hi)[::-1]
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(q).tobytes())


def detect_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".csv":
        return "csv"
    if ext in (".pgm", ".pnm"):
        return "pgm"
    raise FormatError(f"{path}: cannot infer target format from extension {ext!r}")


def load_target(path, fmt_: str | None = None, grid: GridSpec | None = None) -> TargetField:
    """Load a target density field.

    Parameters
    ----------
    path : path-like
    fmt_ : {"csv", "pgm"}, optional
        Inferred from the extension when omitted.
    grid : GridSpec, optional
        Grid the field must match; when omitted a grid on the unit square
        with the file's dimensions is used.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"target file not found: {path}")
    kind = (fmt_ or detect_format(path)).lower()
    if kind == "csv":
        values = read_field_csv(path)
    elif kind == "pgm":
        values = read_pgm(path)
    else:
        raise FormatError(f"unknown target format {fmt_!r}")
    ny, nx = values.shape
    if grid is None:
        grid = GridSpec(nx, ny)
    elif (grid.ny, grid.nx) != (ny, nx):
        raise FormatError(f"{path}: field is {nx}x{ny} but the grid is {grid.nx}x{grid.ny}")
    return TargetField(values, grid)


def generate_target(pills, grid: GridSpec, tspec: TransitionSpec) -> TargetField:
    """Element averages of the pointwise maximum of the pills' densities."""
    Z = pills.matrix() if isinstance(pills, DesignVector) else np.asarray(pills, dtype=float).reshape(-1, 5)
    if Z.shape[0] == 0:
        return TargetField(np.zeros((grid.ny, grid.nx)), grid)
    ev = evaluate_design(Z, tspec, AggregatorSpec("sum"), grid, derivatives=False)
    field = ev.quad.average(ev.rho_points.max(axis=1)).reshape(grid.eval_shape)
    return TargetField(np.clip(grid.crop(field), 0.0, 1.0), grid)


# -------------------------------------------------------------- pill table


def write_pills(path, design) -> None:
    Z = design.matrix() if isinstance(design, DesignVector) else np.asarray(design, dtype=float).reshape(-1, 5)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(PILL_HEADER) + "\n")
        for i, z in enumerate(Z):
            fh.write(",".join([str(i)] + [fmt(v) for v in z]) + "\n")


def read_pills(path) -> DesignVector:
    """Read a pill table written by :func:`write_pills` (rows ordered by id)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PILL_HEADER:
            raise FormatError(f"{path}: line 1: expected header {','.join(PILL_HEADER)}")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PILL_HEADER):
                raise FormatError(f"{path}: line {lineno}: expected {len(PILL_HEADER)} columns")
            try:
                ids.append(int(row[0]))
                vals = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise FormatError(f"{path}: line {lineno}: non-finite pill parameter")
            rows.append(vals)
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate pill ids")
    order = np.argsort(ids, kind="stable")
    Z = np.array(rows, dtype=float).reshape(-1, 5)[order]
    try:
        return DesignVector.from_array(Z)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ----------------------------------------------------------------- outputs


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("eval_index,objective,stage\n")
        for e, v, s in trace:
            fh.write(f"{int(e)},{fmt(v)},{int(s)}\n")


def write_outputs(outdir, design: DesignVector, target: TargetField, density, trace,
                  config_text: str | None = None) -> list[Path]:
    """Write the standard result files into ``outdir`` and return their paths.

    ``density`` is the reconstructed (ny, nx) element field.
    """
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    density = np.asarray(density, dtype=float)
    residual = target.values - density
    files = []

    def emit(name, writer, *args):
        p = out / name
        try:
            writer(p, *args)
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        files.append(p)

    emit("pills.csv", write_pills, design)
    emit("density.csv", write_field_csv, density)
    emit("density.pgm", write_pgm, density)
    emit("residual.csv", write_field_csv, residual)
    emit("residual.pgm", write_pgm, residual, -1.0, 1.0)
    emit("abs_residual.csv", write_field_csv, np.abs(residual))
    emit("abs_residual.pgm", write_pgm, np.abs(residual))
    emit("reward.csv", write_field_csv, density * target.values)
    emit("trace.csv", write_trace, trace)
    if config_text is not None:
        emit("config.yaml", lambda p, t: Path(p).write_text(t), config_text)
    return files
