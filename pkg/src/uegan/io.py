"""Raster (binary PGM/PPM), checkpoint (UEGT) and flat key=value config I/O.

UEGT checkpoint layout, all little-endian: the magic ``b"UEGT"`` followed by
named tensors until end of file, each one::

    u16 name length, UTF-8 name, u32 rank, u32 dims[rank], f32 payload
"""
import dataclasses
import struct

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParseError
from .losses import LossConfig
from .metrics import MetricConfig
from .network import ModelConfig
from .training import TrainConfig

MAGIC = b"UEGT"


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_header(buf, n_fields):
    """Parse whitespace-separated header tokens (with # comments); returns tokens and payload offset."""
    tokens = []
    pos = 0
    while len(tokens) < n_fields:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ParseError("truncated header", pos)
        if buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated comment", pos)
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append((buf[start:pos], start))
    if pos >= len(buf):
        raise ParseError("missing whitespace after header", pos)
    return tokens, pos + 1


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) with maxval 255; returns uint8 (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, offset = _read_header(buf, 4)
    magic = tokens[0][0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}", tokens[0][1])
    values = []
    for tok, at in tokens[1:]:
        try:
            values.append(int(tok))
        except ValueError:
            raise ParseError(f"bad header field {tok!r}", at) from None
    w, h, maxval = values
    if w <= 0 or h <= 0:
        raise ParseError("non-positive image size", tokens[1][1])
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", tokens[3][1])
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(buf) - offset < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(buf) - offset}", len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_pnm(path, array):
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("write_pnm expects uint8 data")
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported raster shape {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(a).tobytes())


def load_raster(path):
    """PPM -> float32 (3, H, W) in [0, 1]; PGM -> float32 {0, 1} mask (H, W) thresholded at 128."""
    a = read_pnm(path)
    if a.ndim == 3:
        return (a.transpose(2, 0, 1) / 255.0).astype(np.float32)
    return (a >= 128).astype(np.float32)


def load_gray(path):
    """PGM as float32 in [0, 1] without binarisation."""
    a = read_pnm(path)
    if a.ndim != 2:
        raise ParseError("expected a PGM file", 0)
    return (a / 255.0).astype(np.float32)


def save_mask(path, mask):
    write_pnm(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def save_gray(path, values):
    """Linearly scale a map to 0..255 (min to max) and write it as PGM."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    write_pnm(path, np.round(scaled * 255).astype(np.uint8))


def save_image(path, image):
    """Write a (3, H, W) float image in [0, 1] as PPM."""
    a = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    write_pnm(path, a)


# ---------------------------------------------------------------------------
# UEGT tensors and checkpoints


def _pack_tensor(arr):
    a = np.ascontiguousarray(arr, dtype="<f4")
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _unpack_tensor(buf, pos):
    if len(buf) < pos + 4:
        raise ParseError("truncated tensor rank", pos)
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * rank:
        raise ParseError("truncated tensor dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(dims)) if rank else 1
    if len(buf) < pos + 4 * n:
        raise ParseError("truncated tensor payload", pos)
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
    return arr, pos + 4 * n


def save_checkpoint(path, params):
    """Write an ordered mapping of name -> Tensor/array."""
    parts = [MAGIC]
    for name, value in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"name too long: {name[:40]}...")
        data = value.data if isinstance(value, T.Tensor) else value
        parts.append(struct.pack("<H", len(raw)) + raw + _pack_tensor(data))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Read a checkpoint into an ordered dict of Tensors.

    Running batch-norm statistics (``.mean``/``.var``) load as non-trainable.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ParseError("not a UEGT checkpoint", 0)
    pos = 4
    out = {}
    while pos < len(buf):
        if len(buf) < pos + 2:
            raise ParseError("truncated entry name length", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + n:
            raise ParseError("truncated entry name", pos)
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        arr, pos = _unpack_tensor(buf, pos)
        is_stat = name.endswith(".mean") or name.endswith(".var")
        out[name] = T.Tensor(arr, requires_grad=not is_stat)
    return out


# ---------------------------------------------------------------------------
# flat config


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    metric: MetricConfig = dataclasses.field(default_factory=MetricConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)


SECTIONS = ("model", "loss", "metric", "train")


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# fields whose default is None, with the type of a present value
OPTIONAL_FIELDS = {"loss.hd_cap": float, "loss.ds_weights": tuple}


def _parse_value(text, default, key):
    text = text.strip()
    try:
        if text.lower() == "none":
            return None
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        kind = OPTIONAL_FIELDS.get(key, type(default))
        if kind is tuple:
            item = type(default[0]) if default else float
            return tuple(item(v) for v in text.split(",") if v.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def serialize_config(cfg):
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text):
    """Parse ``section.key = value`` lines (``#`` comments allowed); unknown keys are errors."""
    values = {s: {} for s in SECTIONS}
    base = RunConfig()
    known = {s: {f.name for f in dataclasses.fields(getattr(base, s))} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in values or name not in known[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        current = getattr(getattr(base, section), name)
        values[section][name] = _parse_value(value, current, key)
    try:
        return RunConfig(
            model=ModelConfig(**values["model"]),
            loss=LossConfig(**values["loss"]),
            metric=MetricConfig(**values["metric"]),
            train=TrainConfig(**values["train"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
