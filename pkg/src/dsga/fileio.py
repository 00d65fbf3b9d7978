"""File formats used by the CLI and pipeline.

TNS1 tensors: one JSON header line ``{"shape":[...],"dtype":"f32"|"f64"}``
terminated by a newline, followed immediately by raw little-endian scalars
in row-major order.

Masks: binary PGM (P5, maxval 255, foreground = 255) or plain-text PBM (P1,
1 = foreground). Saliency maps: 8-bit PGM read as value/255, or TNS1.

Prompts: JSON lines ``{"x":int,"y":int,"confidence":real,"cell":[i,j]}``.
Instance manifests: JSON object with an ``"instances"`` list of
``{"mask": path, "score": real}`` entries (optional ``"prompt_index"``).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .numerics import check_finite

__all__ = [
    "FileFormatError",
    "read_tns",
    "write_tns",
    "read_mask",
    "write_mask_pgm",
    "write_mask_pbm",
    "read_saliency",
    "write_saliency_pgm",
    "write_json",
    "read_json",
]

_TNS_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FileFormatError(Exception):
    """Raised for corrupt or unsupported input files."""


def write_tns(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        code, dt = "f64", _TNS_DTYPES["f64"]
    else:
        code, dt = "f32", _TNS_DTYPES["f32"]
    header = json.dumps({"shape": list(arr.shape), "dtype": code}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("ascii"))
            shape = [int(s) for s in header["shape"]]
            dt = _TNS_DTYPES[header["dtype"]]
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise FileFormatError(f"{path}: bad TNS1 header") from exc
        if any(s < 0 for s in shape):
            raise FileFormatError(f"{path}: negative extent in shape {shape}")
        count = int(np.prod(shape)) if shape else 1
        raw = fh.read()
    expected = count * dt.itemsize
    if len(raw) != expected:
        raise FileFormatError(
            f"{path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(raw, dtype=dt).reshape(shape)
    # native byte order + writable copy; construction validates finiteness
    arr = arr.astype(dt.newbyteorder("="), copy=True)
    try:
        check_finite(arr, str(path))
    except Exception as exc:
        raise FileFormatError(f"{path}: non-finite scalar in payload") from exc
    return arr


def _read_pnm_header(fh, path) -> tuple[bytes, int, int, int]:
    """Parse magic, width, height (and maxval for PGM), skipping # comments."""
    magic = fh.read(2)
    if magic not in (b"P5", b"P1"):
        raise FileFormatError(f"{path}: unsupported PNM magic {magic!r}")
    tokens = []
    want = 3 if magic == b"P5" else 2
    while len(tokens) < want:
        ch = fh.read(1)
        if not ch:
            raise FileFormatError(f"{path}: truncated PNM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            continue
        tok = b""
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        tokens.append(tok)
    try:
        nums = [int(t) for t in tokens]
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad PNM header tokens {tokens}") from exc
    if magic == b"P5":
        w, h, maxval = nums
    else:
        (w, h), maxval = nums, 1
    if w <= 0 or h <= 0:
        raise FileFormatError(f"{path}: bad PNM dimensions {w}x{h}")
    return magic, w, h, maxval


def _read_pgm_gray(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_pnm_header(fh, path)
        if magic == b"P1":
            text = fh.read().decode("ascii", errors="replace")
            bits = [c for c in text if c in "01"]
            if len(bits) < w * h:
                raise FileFormatError(f"{path}: PBM has too few pixels")
            arr = np.array([int(c) for c in bits[: w * h]], dtype=np.uint8)
            return arr.reshape(h, w) * 255
        if maxval != 255:
            raise FileFormatError(f"{path}: only maxval 255 PGM supported, got {maxval}")
        raw = fh.read(w * h)
        if len(raw) != w * h:
            raise FileFormatError(f"{path}: PGM payload truncated")
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def read_mask(path) -> np.ndarray:
    """Read a PGM/PBM mask as a bool [H, W] array (foreground = value > 127)."""
    return _read_pgm_gray(path) > 127


def write_mask_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def write_mask_pbm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask).astype(np.uint8)
    h, w = mask.shape
    lines = [f"P1\n{w} {h}\n"]
    for row in mask:
        lines.append(" ".join(str(int(v)) for v in row) + "\n")
    Path(path).write_bytes("".join(lines).encode("ascii"))


def read_saliency(path) -> np.ndarray:
    """Read a saliency map: 8-bit PGM (value/255) or TNS1, as float64 [H, W]."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pbm"):
        return _read_pgm_gray(path).astype(np.float64) / 255.0
    arr = read_tns(path).astype(np.float64)
    if arr.ndim != 2:
        raise FileFormatError(f"{path}: saliency TNS1 must be rank 2, got {arr.shape}")
    return arr


def write_saliency_pgm(path, sal: np.ndarray) -> None:
    sal = np.clip(np.asarray(sal, dtype=np.float64), 0.0, 1.0)
    h, w = sal.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.rint(sal * 255.0).astype(np.uint8).tobytes())


def write_json(path, obj) -> None:
    # sorted keys + fixed separators keep repeated runs byte-identical
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON") from exc
