"""Bit-exact serialization for checkpoints, palettes, maps, and images.

Every format is little-endian binary with a fixed magic. Checkpoints store
tensors in sorted-name order and end with a CRC32 trailer, so equal states
always produce equal bytes and corruption is detected on load. Loaders fail
with typed errors naming the byte offset; nothing is silently truncated.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import EditModel, ModelConfig
from .tokenizer import Palette

CHECKPOINT_MAGIC = b"MGTC"
PALETTE_MAGIC = b"MGTP"
MAP_MAGIC = b"MGTA"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Decode failure with a stable code and the offending byte offset."""

    def __init__(self, code: str, offset: int, detail: str):
        self.code = code
        self.offset = offset
        super().__init__(f"{detail} (code={code}, byte offset {offset})")


class _Reader:
    """Cursor over a byte string that raises on any short read."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated", self.pos,
                              f"truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


# --- palette (MGTP) --------------------------------------------------------

def palette_bytes(palette: Palette) -> bytes:
    v = palette.vocab_size
    p, c = palette.patch_size, palette.channels
    payload = palette.prototypes.astype("<f4").tobytes()
    return PALETTE_MAGIC + _u32(v) + _u32(p) + _u32(c) + payload


def palette_from_bytes(data: bytes) -> Palette:
    r = _Reader(data)
    if r.take(4, "palette magic") != PALETTE_MAGIC:
        raise FormatError("magic", 0, "not a palette file")
    v = r.u32("vocab size")
    p = r.u32("patch size")
    c = r.u32("channel count")
    vals = np.frombuffer(r.take(v * p * p * c * 4, "prototype data"), dtype="<f4")
    if r.pos != len(data):
        raise FormatError("trailing", r.pos, "trailing bytes after palette")
    protos = vals.astype(np.float64).reshape(v, p * p * c)
    return Palette(prototypes=protos, patch_size=p, channels=c)


def write_palette(palette: Palette, path) -> int:
    data = palette_bytes(palette)
    Path(path).write_bytes(data)
    return len(data)


def read_palette(path) -> Palette:
    return palette_from_bytes(Path(path).read_bytes())


# --- checkpoint (MGTC) -----------------------------------------------------

def _kv_bytes(kv: dict[str, str]) -> bytes:
    out = [_u32(len(kv))]
    for k in sorted(kv):
        kb, vb = k.encode(), kv[k].encode()
        out += [_u32(len(kb)), kb, _u32(len(vb)), vb]
    return b"".join(out)


def _read_kv(r: _Reader) -> dict[str, str]:
    kv = {}
    for _ in range(r.u32("config entry count")):
        k = r.take(r.u32("config key length"), "config key").decode()
        kv[k] = r.take(r.u32("config value length"), "config value").decode()
    return kv


def checkpoint_bytes(config_kv: dict[str, str], palette: Palette,
                     arrays: dict[str, np.ndarray]) -> bytes:
    """Canonical checkpoint stream: sorted keys, sorted tensor names."""
    for name, arr in arrays.items():
        if not np.isfinite(arr).all():
            raise ValueError(f"NaN in checkpoint: tensor {name}")
    pal = palette_bytes(palette)
    parts = [CHECKPOINT_MAGIC, _u32(CHECKPOINT_VERSION), _kv_bytes(config_kv),
             _u32(len(pal)), pal, _u32(len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode()
        parts += [_u32(len(nb)), nb, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _u32(zlib.crc32(body))


def parse_checkpoint(data: bytes) -> tuple[dict[str, str], Palette, dict[str, np.ndarray]]:
    if len(data) < 4:
        raise FormatError("truncated", 0, "stream shorter than the CRC trailer")
    body, trailer = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", trailer)[0]:
        raise FormatError("crc", len(data) - 4, "checkpoint checksum mismatch")
    r = _Reader(body)
    if r.take(4, "checkpoint magic") != CHECKPOINT_MAGIC:
        raise FormatError("magic", 0, "not a checkpoint file")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError("version", 4, f"unsupported checkpoint version {version}")
    kv = _read_kv(r)
    palette = palette_from_bytes(r.take(r.u32("palette blob length"), "palette blob"))
    arrays = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("tensor name length"), "tensor name").decode()
        rank = r.u32("tensor rank")
        shape = tuple(r.u32("tensor dim") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        vals = np.frombuffer(r.take(count * 4, f"tensor {name} data"), dtype="<f4")
        arrays[name] = vals.reshape(shape).copy()
    if r.pos != len(body):
        raise FormatError("trailing", r.pos, "trailing bytes after tensor table")
    return kv, palette, arrays


def save_checkpoint(model: EditModel, palette: Palette, path) -> int:
    data = checkpoint_bytes(model.config.to_kv(), palette, model.state_arrays())
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path) -> tuple[EditModel, Palette]:
    kv, palette, arrays = parse_checkpoint(Path(path).read_bytes())
    model = EditModel(ModelConfig.from_kv(kv), seed=0)
    model.load_state_arrays(arrays)
    return model, palette


# --- lossless map (MGTA) ---------------------------------------------------

def map_bytes(amap: np.ndarray) -> bytes:
    amap = np.asarray(amap, dtype=np.float64)
    if amap.ndim != 2:
        raise ValueError("map must be 2-D")
    h, w = amap.shape
    return MAP_MAGIC + _u32(h) + _u32(w) + amap.astype("<f4").tobytes()


def map_from_bytes(data: bytes) -> np.ndarray:
    r = _Reader(data)
    if r.take(4, "map magic") != MAP_MAGIC:
        raise FormatError("magic", 0, "not a map file")
    h = r.u32("map height")
    w = r.u32("map width")
    vals = np.frombuffer(r.take(h * w * 4, "map data"), dtype="<f4")
    if r.pos != len(data):
        raise FormatError("trailing", r.pos, "trailing bytes after map")
    return vals.astype(np.float64).reshape(h, w)


def write_map(amap: np.ndarray, path) -> int:
    data = map_bytes(amap)
    Path(path).write_bytes(data)
    return len(data)


def read_map(path) -> np.ndarray:
    return map_from_bytes(Path(path).read_bytes())


# --- PPM / PGM (maxval 255 only) -------------------------------------------

def _netpbm_header(r: _Reader, magic: bytes):
    got = r.take(2, "netpbm magic")
    if got != magic:
        raise FormatError("magic", 0, f"expected {magic.decode()} image")

    def token(what):
        # Whitespace-separated ASCII fields; '#' starts a comment to EOL.
        while True:
            start = r.pos
            ch = r.take(1, what)
            if ch == b"#":
                while r.take(1, what) != b"\n":
                    pass
            elif not ch.isspace():
                break
        out = ch
        while True:
            ch = r.take(1, what)
            if ch.isspace():
                return start, out
            out += ch

    dims, starts = [], []
    for what in ("width", "height", "maxval"):
        start, tok = token(what)
        if not tok.isdigit():
            raise FormatError("header", start, f"malformed {what} field")
        dims.append(int(tok))
        starts.append(start)
    w, h, maxval = dims
    if w < 1 or h < 1:
        raise FormatError("header", starts[0], "image dimensions must be positive")
    if maxval != 255:
        raise FormatError("header", starts[2], "only maxval 255 is supported")
    return h, w


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0),
                   0, 255).astype(np.uint8)


def write_ppm(image: np.ndarray, path) -> int:
    """Write an H x W x 3 image with values in [0, 1] as binary PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM image must be H x W x 3")
    h, w = image.shape[:2]
    data = f"P6\n{w} {h}\n255\n".encode() + _to_u8(image).tobytes()
    Path(path).write_bytes(data)
    return len(data)


def read_ppm(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    h, w = _netpbm_header(r, b"P6")
    raw = np.frombuffer(r.take(h * w * 3, "pixel data"), dtype=np.uint8)
    if r.pos != len(r.data):
        raise FormatError("trailing", r.pos, "trailing bytes after pixel data")
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(gray: np.ndarray, path) -> int:
    """Write an H x W gray image with values in [0, 1] as binary PGM."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError("PGM image must be H x W")
    h, w = gray.shape
    data = f"P5\n{w} {h}\n255\n".encode() + _to_u8(gray).tobytes()
    Path(path).write_bytes(data)
    return len(data)


def read_pgm(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    h, w = _netpbm_header(r, b"P5")
    raw = np.frombuffer(r.take(h * w, "pixel data"), dtype=np.uint8)
    if r.pos != len(r.data):
        raise FormatError("trailing", r.pos, "trailing bytes after pixel data")
    return raw.reshape(h, w).astype(np.float64) / 255.0


def map_to_gray(amap: np.ndarray) -> np.ndarray:
    """Min-max scale a map to [0, 1] for PGM export; flat maps go to 1."""
    amap = np.asarray(amap, dtype=np.float64)
    lo, hi = float(amap.min()), float(amap.max())
    if hi > lo:
        return (amap - lo) / (hi - lo)
    return np.ones_like(amap)
