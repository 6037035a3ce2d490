"""Binary file formats.

SPTN (tensor):  b"SPTN" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank=4 |
                4 x u32 dims | raw values, all little-endian.
SPLB (labels):  b"SPLB" | u16 version=1 | u8 ignore code | u32 H | u32 W |
                H*W x u16 labels, row-major, little-endian.
PGM:            binary "P5" greyscale, maxval 255.

A checkpoint is a directory of SPTN files plus ``manifest.json`` mapping
parameter names to file names.
"""
from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

SPTN_MAGIC = b"SPTN"
SPLB_MAGIC = b"SPLB"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_SPTN_HEADER = struct.Struct("<4sHBB4I")
_SPLB_HEADER = struct.Struct("<4sHBII")


class FormatError(ValueError):
    """Malformed file; the message names the byte offset where parsing failed."""


def encode_sptn(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise FormatError(f"SPTN stores rank-4 arrays, got shape {arr.shape}")
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"SPTN stores float32/float64, got {arr.dtype}")
    header = _SPTN_HEADER.pack(SPTN_MAGIC, VERSION, code, 4, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_sptn(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != SPTN_MAGIC:
        raise FormatError(f"bad SPTN magic at byte 0: {bytes(buf[:4])!r}")
    if len(buf) < _SPTN_HEADER.size:
        raise FormatError(f"truncated SPTN header at byte {len(buf)} (need {_SPTN_HEADER.size})")
    _, version, code, rank, *dims = _SPTN_HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported SPTN version {version} at byte 4")
    if code not in _DTYPES:
        raise FormatError(f"unknown SPTN dtype code {code} at byte 6")
    if rank != 4:
        raise FormatError(f"SPTN rank must be 4, got {rank} at byte 7")
    dt = _DTYPES[code]
    need = _SPTN_HEADER.size + int(np.prod(dims)) * dt.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated SPTN payload at byte {len(buf)} (need {need})")
    if len(buf) > need:
        raise FormatError(f"trailing bytes after SPTN payload at byte {need}")
    return np.frombuffer(buf, dtype=dt, offset=_SPTN_HEADER.size).reshape(dims).astype(dt.newbyteorder("="))


def write_sptn(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_sptn(arr))


def read_sptn(path: str | Path) -> np.ndarray:
    return decode_sptn(Path(path).read_bytes())


def encode_splb(labels: np.ndarray, ignore_label: int = 255) -> bytes:
    lab = np.asarray(labels)
    lab = lab.reshape(lab.shape[-2:]) if lab.ndim > 2 and np.prod(lab.shape[:-2]) == 1 else lab
    if lab.ndim != 2:
        raise FormatError(f"SPLB stores one H x W label map, got shape {np.shape(labels)}")
    if not 0 <= ignore_label <= 255:
        raise FormatError(f"ignore code must fit in a byte, got {ignore_label}")
    if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
        raise FormatError("labels must fit in u16")
    h, w = lab.shape
    return _SPLB_HEADER.pack(SPLB_MAGIC, VERSION, ignore_label, h, w) + lab.astype("<u2").tobytes()


def decode_splb(buf: bytes) -> tuple[np.ndarray, int]:
    """Returns (labels as int64 (H, W), ignore code)."""
    if len(buf) < 4 or buf[:4] != SPLB_MAGIC:
        raise FormatError(f"bad SPLB magic at byte 0: {bytes(buf[:4])!r}")
    if len(buf) < _SPLB_HEADER.size:
        raise FormatError(f"truncated SPLB header at byte {len(buf)} (need {_SPLB_HEADER.size})")
    _, version, ignore, h, w = _SPLB_HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported SPLB version {version} at byte 4")
    need = _SPLB_HEADER.size + 2 * h * w
    if len(buf) < need:
        raise FormatError(f"truncated SPLB payload at byte {len(buf)} (need {need})")
    if len(buf) > need:
        raise FormatError(f"trailing bytes after SPLB payload at byte {need}")
    lab = np.frombuffer(buf, dtype="<u2", offset=_SPLB_HEADER.size).reshape(h, w).astype(np.int64)
    return lab, ignore


def write_splb(path: str | Path, labels: np.ndarray, ignore_label: int = 255) -> None:
    Path(path).write_bytes(encode_splb(labels, ignore_label))


def read_splb(path: str | Path) -> tuple[np.ndarray, int]:
    return decode_splb(Path(path).read_bytes())


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D map in [0, 1], stored as round(v * 255)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise FormatError(f"PGM needs a 2-D map, got shape {v.shape}")
    px = np.clip(np.rint(v * 255), 0, 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if not m:
        raise FormatError(f"{path}: not a binary PGM (byte 0)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    start = m.end()
    if len(buf) - start < w * h:
        raise FormatError(f"{path}: truncated PGM payload at byte {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=start).reshape(h, w)


# -- checkpoints -------------------------------------------------------------

def _fname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".sptn"


def save_checkpoint(directory: str | Path, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in params.items():
        f = _fname(name)
        write_sptn(d / f, arr)
        manifest[name] = f
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if extra is not None:
        (d / "checkpoint.json").write_text(json.dumps(extra, indent=1, sort_keys=True))


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    manifest = json.loads(mpath.read_text())
    params = {name: read_sptn(d / f) for name, f in manifest.items()}
    extra_path = d / "checkpoint.json"
    extra = json.loads(extra_path.read_text()) if extra_path.exists() else {}
    return params, extra
