"""Files the toolkit reads and writes: PNG images, the SSCW weight container and JSON run configs.

SSCW layout (little-endian throughout):

    magic "SSCW" | version u16 | tensor_count u32
    per entry: name_len u16 | name UTF-8 | rank u8 | dims u32 x rank
               | dtype u8 (0 = f64) | byte_len u64 | raw data
    crc32 u32 of every preceding byte

Names are unique, dims are positive, byte_len == 8 * product(dims).
"""
import io
import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from PIL import Image
from jsonschema import Draft202012Validator
from pydantic import ValidationError
from loguru import logger

from errors import (
    BadMagicError,
    ChecksumMismatchError,
    ConfigValidationError,
    CorruptEntryError,
    DuplicateNameError,
    MissingPairError,
    ShapeError,
    TrailingDataError,
    TruncatedFileError,
    UnsupportedFormatError,
    UnsupportedVersionError,
)
from models import AttentionConfig, ImageU8, ModelConfig, PatchPair, WeightStore
from tensor import Tensor

PathLike = Union[str, Path]

WEIGHT_MAGIC = b"SSCW"
WEIGHT_VERSION = 1
DTYPE_F64 = 0
MAX_RANK = 8

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# IHDR colour types accepted: 0 grayscale, 2 truecolour.
PNG_COLOR_TYPES = {0: 1, 2: 3}


# ---------------------------------------------------------------- images


def _check_png_header(blob: bytes, path: PathLike) -> None:
    if len(blob) < 33 or blob[:8] != PNG_SIGNATURE or blob[12:16] != b"IHDR":
        logger.error(f"{path} is not a PNG file")
        raise UnsupportedFormatError(f"{path}: not a PNG file")
    bit_depth, color_type, _, _, interlace = struct.unpack(">BBBBB", blob[24:29])
    if bit_depth != 8:
        logger.error(f"{path} has bit depth {bit_depth}")
        raise UnsupportedFormatError(f"{path}: only 8-bit PNGs are supported, got {bit_depth}-bit")
    if color_type not in PNG_COLOR_TYPES:
        logger.error(f"{path} has PNG colour type {color_type}")
        raise UnsupportedFormatError(f"{path}: only grayscale or RGB PNGs are supported (colour type {color_type})")
    if interlace:
        logger.error(f"{path} is interlaced")
        raise UnsupportedFormatError(f"{path}: interlaced PNGs are not supported")


def load_png(path: PathLike) -> ImageU8:
    """Read an 8-bit, non-interlaced grayscale or RGB PNG."""
    path = Path(path)
    blob = path.read_bytes()
    _check_png_header(blob, path)
    with Image.open(io.BytesIO(blob)) as im:
        data = np.asarray(im, dtype=np.uint8)
    if data.ndim == 2:
        data = data[:, :, None]
    logger.debug(f"loaded {path} ({data.shape[1]}x{data.shape[0]}x{data.shape[2]})")
    return ImageU8(data=np.ascontiguousarray(data))


def save_png(img: ImageU8, path: PathLike) -> None:
    path = Path(path)
    data = img.data[:, :, 0] if img.channels == 1 else img.data
    Image.fromarray(np.ascontiguousarray(data)).save(path, format="PNG")
    logger.debug(f"wrote {path} ({img.width}x{img.height}x{img.channels})")


def image_to_tensor(img: ImageU8) -> Tensor:
    """H x W x C uint8 -> [C, H, W] floats in [0, 1]."""
    return Tensor(img.data.transpose(2, 0, 1) / 255.0)


def tensor_to_image(t: Tensor) -> ImageU8:
    """[C, H, W] floats, clipped to [0, 1] and rounded to 8 bits."""
    if t.ndim != 3 or t.shape[0] not in (1, 3):
        raise ShapeError("image tensors must be [1 or 3, H, W]", t.shape)
    data = np.clip(np.round(t.data.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    return ImageU8(data=data)


def load_patch_pairs(directory: PathLike) -> List[PatchPair]:
    """Pairs `<stem>_lr.png` with `<stem>_hr.png`, sorted by stem."""
    directory = Path(directory)
    if not directory.is_dir():
        logger.error(f"patch directory {directory} does not exist")
        raise FileNotFoundError(f"patch directory not found: {directory}")
    lr = {p.name[: -len("_lr.png")]: p for p in directory.glob("*_lr.png")}
    hr = {p.name[: -len("_hr.png")]: p for p in directory.glob("*_hr.png")}
    for stem in sorted(set(lr) ^ set(hr)):
        have, want = (lr[stem], f"{stem}_hr.png") if stem in lr else (hr[stem], f"{stem}_lr.png")
        logger.error(f"{have.name} has no pair mate {want}")
        raise MissingPairError(have.name, want)
    pairs = [PatchPair(stem=stem, lr=load_png(lr[stem]), hr=load_png(hr[stem])) for stem in sorted(lr)]
    logger.info(f"loaded {len(pairs)} patch pairs from {directory}")
    return pairs


# ---------------------------------------------------------------- weights


def encode_weights(store: WeightStore) -> bytes:
    names = list(store)
    if len(set(names)) != len(names):
        raise DuplicateNameError("weight names must be unique")
    parts = [WEIGHT_MAGIC, struct.pack("<HI", WEIGHT_VERSION, len(store))]
    for name, tensor in store.items():
        raw_name = name.encode("utf-8")
        if not raw_name or len(raw_name) > 0xFFFF:
            raise CorruptEntryError(f"weight name {name!r} cannot be stored")
        dims = tuple(tensor.shape)
        if len(dims) > MAX_RANK or any(d < 1 for d in dims):
            raise CorruptEntryError(f"weight {name} has unsupported shape {dims}")
        data = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{len(dims)}I", len(dims), *dims))
        parts.append(struct.pack("<BQ", DTYPE_F64, len(data)))
        parts.append(data)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Cursor:
    """Bounds-checked reader over a byte string."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n > len(self.blob) - self.pos:
            raise TruncatedFileError(
                f"{what} at offset {self.pos} needs {n} bytes, only {len(self.blob) - self.pos} remain"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weights(blob: bytes) -> WeightStore:
    cur = _Cursor(blob)
    magic = cur.take(len(WEIGHT_MAGIC), "magic")
    if magic != WEIGHT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
    (version,) = cur.unpack("<H", "version")
    if version != WEIGHT_VERSION:
        raise UnsupportedVersionError(f"weight format version {version} is not supported")
    (count,) = cur.unpack("<I", "tensor count")
    store: WeightStore = OrderedDict()
    for index in range(count):
        (name_len,) = cur.unpack("<H", f"entry {index} name length")
        if name_len == 0:
            raise CorruptEntryError(f"entry {index} has an empty name")
        try:
            name = cur.take(name_len, f"entry {index} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptEntryError(f"entry {index} name is not UTF-8: {e}") from None
        (rank,) = cur.unpack("<B", f"{name} rank")
        if rank > MAX_RANK:
            raise CorruptEntryError(f"{name} has rank {rank} > {MAX_RANK}")
        dims = cur.unpack(f"<{rank}I", f"{name} dims")
        if any(d == 0 for d in dims):
            raise CorruptEntryError(f"{name} has a zero dimension {dims}")
        dtype, byte_len = cur.unpack("<BQ", f"{name} dtype and length")
        if dtype != DTYPE_F64:
            raise CorruptEntryError(f"{name} has unknown dtype tag {dtype}")
        expected = 8 * int(np.prod(dims, dtype=object)) if dims else 8
        if byte_len != expected:
            raise CorruptEntryError(f"{name} declares {byte_len} bytes, shape {dims} needs {expected}")
        raw = cur.take(byte_len, f"{name} data")
        if name in store:
            raise DuplicateNameError(f"weight {name} appears more than once")
        store[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(dims))
    checked = cur.pos
    (crc,) = cur.unpack("<I", "checksum")
    actual = zlib.crc32(blob[:checked]) & 0xFFFFFFFF
    if crc != actual:
        raise ChecksumMismatchError(f"checksum {crc:#010x} does not match contents {actual:#010x}")
    if cur.pos != len(blob):
        raise TrailingDataError(f"{len(blob) - cur.pos} unexpected bytes after the checksum")
    return store


def save_weights(store: WeightStore, path: PathLike) -> None:
    path = Path(path)
    blob = encode_weights(store)
    path.write_bytes(blob)
    logger.info(f"saved {len(store)} tensors ({len(blob):,} bytes) to {path}")


def load_weights(path: PathLike) -> WeightStore:
    path = Path(path)
    blob = path.read_bytes()
    try:
        store = decode_weights(blob)
    except Exception as e:
        logger.error(f"failed to load weights from {path}: {e}")
        raise
    logger.info(f"loaded {len(store)} tensors from {path}")
    return store


# ---------------------------------------------------------------- run config


def run_config_schema() -> Dict:
    return ModelConfig.model_json_schema()


def _schema_error_key(error) -> str:
    if error.validator == "additionalProperties" and isinstance(error.instance, dict):
        allowed = set(error.schema.get("properties", {}))
        unexpected = sorted(k for k in error.instance if k not in allowed)
        if unexpected:
            return ".".join([str(p) for p in error.absolute_path] + [unexpected[0]])
    path = ".".join(str(p) for p in error.absolute_path)
    return path or "<config>"


def parse_run_config(document: Dict) -> Tuple[ModelConfig, AttentionConfig]:
    if not isinstance(document, dict):
        raise ConfigValidationError("<config>", "run config must be a JSON object")
    validator = Draft202012Validator(run_config_schema())
    errors = sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path))
    if errors:
        key = _schema_error_key(errors[0])
        logger.error(f"run config key {key}: {errors[0].message}")
        raise ConfigValidationError(key, errors[0].message)
    try:
        cfg = ModelConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"]) or "<config>"
        logger.error(f"run config key {key}: {first['msg']}")
        raise ConfigValidationError(key, first["msg"]) from None
    return cfg, cfg.attention_config()


def load_run_config(path: PathLike) -> Tuple[ModelConfig, AttentionConfig]:
    """JSON run config -> (ModelConfig, AttentionConfig); missing keys take the defaults."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        logger.error(f"error parsing JSON in {path}: {e}")
        raise ConfigValidationError("<document>", f"malformed JSON: {e}") from None
    cfg, att = parse_run_config(document)
    logger.info(f"loaded run config from {path}")
    return cfg, att
