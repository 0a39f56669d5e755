"""File formats: WSFT tensors, binary PPM/PGM, label lists, metric reports
and checkpoint directories."""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

WSFT_MAGIC = b"WSFT"
WSFT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# WSFT


def encode_wsft(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.ndim != 4:
        raise FormatError(f"WSFT holds rank-4 tensors, got rank {arr.ndim}")
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = WSFT_MAGIC + struct.pack("<IBB4I", WSFT_VERSION, code, 4, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


def decode_wsft(blob: bytes) -> np.ndarray:
    if blob[:4] != WSFT_MAGIC:
        raise FormatError("bad WSFT magic")
    version, code, rank, *shape = struct.unpack_from("<IBB4I", blob, 4)
    if version != WSFT_VERSION or rank != 4 or code not in _CODE_DTYPES:
        raise FormatError(f"unsupported WSFT header (version {version}, dtype {code}, rank {rank})")
    dt = _CODE_DTYPES[code]
    offset = 4 + struct.calcsize("<IBB4I")
    count = int(np.prod(shape))
    if len(blob) != offset + count * dt.itemsize:
        raise FormatError("WSFT payload length does not match header")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def save_wsft(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_wsft(array))


def load_wsft(path) -> np.ndarray:
    return decode_wsft(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Netpbm


def encode_ppm(image: np.ndarray) -> bytes:
    """(H, W, 3) uint8 -> binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise FormatError("PPM expects an (H, W, 3) uint8 array")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def encode_pgm(mask: np.ndarray) -> bytes:
    """(H, W) uint8 -> binary P5."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.dtype != np.uint8:
        raise FormatError("PGM expects an (H, W) uint8 array")
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode() + m.tobytes()


def _read_pnm(blob: bytes, magic: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"expected {magic!r} header, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError("only maxval 255 is supported")
    return w, h, blob[pos + 1:]


def decode_ppm(blob: bytes) -> np.ndarray:
    w, h, data = _read_pnm(blob, b"P6")
    return np.frombuffer(data, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3).copy()


def decode_pgm(blob: bytes) -> np.ndarray:
    w, h, data = _read_pnm(blob, b"P5")
    return np.frombuffer(data, dtype=np.uint8, count=h * w).reshape(h, w).copy()


def save_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))


def load_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_pgm(path, mask) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def load_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# labels file: "filename: c1,c2,..."


def format_labels(entries: dict[str, list[int]]) -> str:
    return "".join(f"{name}: {','.join(str(c) for c in classes)}\n" for name, classes in entries.items())


def parse_labels(text: str) -> dict[str, list[int]]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        name, _, rest = line.partition(":")
        out[name.strip()] = [int(c) for c in rest.split(",") if c.strip()]
    return out


# ---------------------------------------------------------------------------
# key = value text (config files, checkpoint manifests)


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_key_values(items: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


# ---------------------------------------------------------------------------
# metrics report


def format_report(ious: dict[int, float], miou: float, pixacc: float, header: str = "metric, value") -> str:
    lines = [header]
    lines += [f"{c}, {v:.6f}" for c, v in sorted(ious.items())]
    lines += [f"miou, {miou:.6f}", f"pixacc, {pixacc:.6f}"]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> tuple[dict[int, float], float, float]:
    lines = text.splitlines()[1:]
    ious, miou, pixacc = {}, None, None
    for line in lines:
        key, _, value = line.partition(",")
        key, value = key.strip(), float(value)
        if key == "miou":
            miou = value
        elif key == "pixacc":
            pixacc = value
        else:
            ious[int(key)] = value
    if miou is None or pixacc is None:
        raise FormatError("report lacks miou/pixacc lines")
    return ious, miou, pixacc


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def tensor_filename(key: str) -> str:
    return key.replace("/", "__") + ".wsft"


def save_checkpoint(directory, tensors: dict[str, np.ndarray], manifest: dict[str, object]) -> None:
    """Write ``manifest.txt`` plus one WSFT file per named array."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("*.wsft"):
        old.unlink()
    for key in sorted(tensors):
        save_wsft(d / tensor_filename(key), tensors[key])
    head = {"version": CHECKPOINT_VERSION, **manifest}
    (d / "manifest.txt").write_text(format_key_values(head))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    d = Path(directory)
    manifest = parse_key_values((d / "manifest.txt").read_text(), str(d / "manifest.txt"))
    tensors = {}
    for f in sorted(d.glob("*.wsft")):
        tensors[f.name[:-len(".wsft")].replace("__", "/")] = load_wsft(f)
    return tensors, manifest


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def tree_digest(directory) -> str:
    """SHA-256 over relative paths and bytes of every file under ``directory``."""
    h = hashlib.sha256()
    root = Path(directory)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode() + b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()
