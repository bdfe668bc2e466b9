"""On-disk formats: flat float64 cubes with text headers, endmember CSV, provenance.

Cube payloads are little-endian 64-bit floats in band-interleaved-by-pixel
order (row-major pixels, all bands of a pixel consecutive). The companion
header is plain text, one ``key = value`` per line, with keys ``height``,
``width`` and ``bands``. Abundance stacks reuse the same layout with the
endmember count in the ``bands`` slot.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataFormatError
from .mixing import EndmemberMatrix, HyperspectralCube

_HEADER_KEYS = ("height", "width", "bands")


def write_header(path: str, height: int, width: int, bands: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"height = {height}\n")
        fh.write(f"width = {width}\n")
        fh.write(f"bands = {bands}\n")


def read_header(path: str) -> tuple[int, int, int]:
    """Parse a cube header; returns (height, width, bands)."""
    values: dict[str, int] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read header {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataFormatError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _HEADER_KEYS:
            raise DataFormatError(f"{path}:{lineno}: unknown header key {key!r}")
        try:
            value = int(raw.strip())
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {key} must be an integer") from exc
        if value < 1:
            raise DataFormatError(f"{path}:{lineno}: {key} must be positive, got {value}")
        values[key] = value
    missing = [k for k in _HEADER_KEYS if k not in values]
    if missing:
        raise DataFormatError(f"{path}: missing header keys {missing}")
    return values["height"], values["width"], values["bands"]


def write_stack(data: np.ndarray, data_path: str, header_path: str) -> None:
    """Write an (H, W, B) float stack as flat little-endian float64 plus header."""
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f8"))
    if arr.ndim != 3:
        raise ValueError(f"stack must be 3-D, got shape {arr.shape}")
    with open(data_path, "wb") as fh:
        fh.write(arr.tobytes(order="C"))
    write_header(header_path, arr.shape[0], arr.shape[1], arr.shape[2])


def read_stack(data_path: str, header_path: str) -> np.ndarray:
    """Read a flat float64 stack back into an (H, W, B) array."""
    height, width, bands = read_header(header_path)
    expected = height * width * bands * 8
    try:
        actual = os.path.getsize(data_path)
    except OSError as exc:
        raise DataFormatError(f"cannot read cube payload {data_path}: {exc}") from exc
    if actual != expected:
        raise DataFormatError(
            f"{data_path}: payload is {actual} bytes but header "
            f"{height}x{width}x{bands} float64 implies {expected} bytes"
        )
    raw = np.fromfile(data_path, dtype="<f8")
    return raw.reshape(height, width, bands).astype(np.float64)


def write_cube(cube: HyperspectralCube, data_path: str, header_path: str) -> None:
    write_stack(cube.data, data_path, header_path)


def read_cube(data_path: str, header_path: str) -> HyperspectralCube:
    return HyperspectralCube(read_stack(data_path, header_path))


def save_endmembers(A: EndmemberMatrix, path: str) -> None:
    """Endmember CSV: one row per band, one column per endmember, no header."""
    np.savetxt(path, A.values, fmt="%.17g", delimiter=",", newline="\n")


def load_endmembers(path: str) -> EndmemberMatrix:
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except OSError as exc:
        raise DataFormatError(f"cannot read endmember CSV {path}: {exc}") from exc
    except ValueError as exc:
        raise DataFormatError(f"malformed endmember CSV {path}: {exc}") from exc
    try:
        return EndmemberMatrix(values)
    except ValueError as exc:
        raise DataFormatError(f"invalid endmember matrix in {path}: {exc}") from exc


def write_provenance(path: str, entries: dict) -> None:
    """Plain-text key = value provenance record, insertion-ordered."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


def read_provenance(path: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read provenance {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        entries[key.strip()] = raw.strip()
    return entries
