"""Binary grid, router-model and token-sequence files, JSONL labels, and key-value run configs.

All binary formats are little-endian.

Grid file (``FGRD``)::

    magic[4] version:u16 flags:u16 H:u32 W:u32 D:u32
    features      f32[H*W*D]
    cls_attn      f32[H*W]        if flags & 1
    text_sim      f32[H*W]        if flags & 2
    q_cls, keys   f32[D], f32[H*W*D]  if flags & 4   (exclusive with bit 0)

Router model file (``DCRT``)::

    magic[4] version:u16 rho_min:f64 D_t:u32 H1:u32 H2:u32
    w1 b1 w2 b2 w_lam b_lam w_rho b_rho   as row-major f64

Sequence file (``DCSQ``)::

    magic[4] version:u16 count:u32 D:u32
    count x { source_kind:u8 stream:u8 pad:u16 a:i32 b:i32 weight:f64 vector:f32[D] }

``source_kind`` 0 means (a, b) is a (row, col) cell; 1 means ``a`` is a cluster id.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from dualcomp.fusion import FULL, GEOMETRIC, SEMANTIC, CompressedSequence
from dualcomp.grid import FeatureGrid
from dualcomp.router import PARAM_NAMES, LabelRecord, RouterModel

GRID_MAGIC = b"FGRD"
MODEL_MAGIC = b"DCRT"
SEQ_MAGIC = b"DCSQ"
VERSION = 1

FLAG_ATTN, FLAG_TEXT, FLAG_QK = 1, 2, 4

_GRID_HEADER = struct.Struct("<4sHHIII")
_MODEL_HEADER = struct.Struct("<4sHdIII")
_SEQ_HEADER = struct.Struct("<4sHII")
_TOKEN_META = struct.Struct("<BBHiid")
_STREAM_CODES = {SEMANTIC: 0, GEOMETRIC: 1, FULL: 2}


class FormatError(ValueError):
    pass


def atomic_write(path: str | Path, data: bytes):
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# Grid files
# ---------------------------------------------------------------------------


def grid_to_bytes(grid: FeatureGrid) -> bytes:
    flags = 0
    if grid.cls_attn is not None:
        flags |= FLAG_ATTN
    if grid.text_sim is not None:
        flags |= FLAG_TEXT
    if grid.q_cls is not None:
        flags |= FLAG_QK
    parts = [_GRID_HEADER.pack(GRID_MAGIC, VERSION, flags, grid.height, grid.width, grid.dim), _f32(grid.features)]
    if flags & FLAG_ATTN:
        parts.append(_f32(grid.cls_attn))
    if flags & FLAG_TEXT:
        parts.append(_f32(grid.text_sim))
    if flags & FLAG_QK:
        parts += [_f32(grid.q_cls), _f32(grid.keys)]
    return b"".join(parts)


def grid_from_bytes(data: bytes, name: str = "<bytes>") -> FeatureGrid:
    if len(data) < _GRID_HEADER.size:
        raise FormatError(f"{name}: header needs {_GRID_HEADER.size} bytes, file has {len(data)}")
    magic, version, flags, h, w, d = _GRID_HEADER.unpack_from(data, 0)
    if magic != GRID_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r} at offset 0, expected {GRID_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version} at offset 4")
    if flags & ~(FLAG_ATTN | FLAG_TEXT | FLAG_QK):
        raise FormatError(f"{name}: unknown flag bits 0x{flags:04x} at offset 6")
    if flags & FLAG_ATTN and flags & FLAG_QK:
        raise FormatError(f"{name}: flags at offset 6 set both cls_attn (bit 0) and q_cls/keys (bit 2)")
    n = h * w
    sizes = [("features", n * d)]
    if flags & FLAG_ATTN:
        sizes.append(("cls_attn", n))
    if flags & FLAG_TEXT:
        sizes.append(("text_sim", n))
    if flags & FLAG_QK:
        sizes += [("q_cls", d), ("keys", n * d)]
    expected = _GRID_HEADER.size + 4 * sum(s for _, s in sizes)
    if len(data) != expected:
        raise FormatError(f"{name}: expected {expected} bytes for {h}x{w}x{d} flags=0x{flags:x}, got {len(data)}")
    off = _GRID_HEADER.size
    arrays = {}
    for key, count in sizes:
        arrays[key] = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
        off += 4 * count
    return FeatureGrid(
        features=arrays["features"].reshape(h, w, d),
        cls_attn=arrays["cls_attn"].reshape(h, w) if "cls_attn" in arrays else None,
        text_sim=arrays["text_sim"].reshape(h, w) if "text_sim" in arrays else None,
        q_cls=arrays.get("q_cls"),
        keys=arrays["keys"].reshape(h, w, d) if "keys" in arrays else None,
    )


def write_grid(grid: FeatureGrid, path: str | Path):
    atomic_write(path, grid_to_bytes(grid))


def read_grid(path: str | Path) -> FeatureGrid:
    return grid_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Router model files
# ---------------------------------------------------------------------------


def model_to_bytes(model: RouterModel) -> bytes:
    model.validate()
    d, h1, h2 = model.dims
    parts = [_MODEL_HEADER.pack(MODEL_MAGIC, VERSION, model.rho_min, d, h1, h2)]
    parts += [np.ascontiguousarray(getattr(model, n), dtype="<f8").tobytes() for n in PARAM_NAMES]
    return b"".join(parts)


def model_from_bytes(data: bytes, name: str = "<bytes>") -> RouterModel:
    if len(data) < _MODEL_HEADER.size:
        raise FormatError(f"{name}: truncated model header")
    magic, version, rho_min, d, h1, h2 = _MODEL_HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported model version {version}")
    shapes = [(d, h1), (h1,), (h1, h2), (h2,), (h2, 1), (1,), (h2, 1), (1,)]
    expected = _MODEL_HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise FormatError(f"{name}: expected {expected} bytes for dims ({d}, {h1}, {h2}), got {len(data)}")
    off = _MODEL_HEADER.size
    params = {}
    for pname, shape in zip(PARAM_NAMES, shapes):
        count = int(np.prod(shape))
        params[pname] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    model = RouterModel(**params, rho_min=rho_min)
    model.validate()
    return model


def write_model(model: RouterModel, path: str | Path):
    atomic_write(path, model_to_bytes(model))


def read_model(path: str | Path) -> RouterModel:
    return model_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Sequence files
# ---------------------------------------------------------------------------


def sequence_to_bytes(seq: CompressedSequence) -> bytes:
    d = len(seq.tokens[0].vector) if seq.tokens else 0
    parts = [_SEQ_HEADER.pack(SEQ_MAGIC, VERSION, len(seq.tokens), d)]
    for t in seq.tokens:
        if t.cell is not None:
            kind, a, b = 0, t.cell[0], t.cell[1]
        else:
            kind, a, b = 1, t.cluster, -1
        parts.append(_TOKEN_META.pack(kind, _STREAM_CODES[t.stream], 0, a, b, t.weight))
        parts.append(_f32(t.vector))
    return b"".join(parts)


def read_sequence(path: str | Path) -> list[dict]:
    """Decode a sequence file into plain records (for inspection and tests)."""
    data = Path(path).read_bytes()
    magic, version, count, d = _SEQ_HEADER.unpack_from(data, 0)
    if magic != SEQ_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    rec_size = _TOKEN_META.size + 4 * d
    if len(data) != _SEQ_HEADER.size + count * rec_size:
        raise FormatError(f"{path}: expected {_SEQ_HEADER.size + count * rec_size} bytes, got {len(data)}")
    streams = {v: k for k, v in _STREAM_CODES.items()}
    out = []
    off = _SEQ_HEADER.size
    for _ in range(count):
        kind, stream, _, a, b, weight = _TOKEN_META.unpack_from(data, off)
        off += _TOKEN_META.size
        vec = np.frombuffer(data, dtype="<f4", count=d, offset=off).copy()
        off += 4 * d
        src = {"cell": (a, b)} if kind == 0 else {"cluster": a}
        out.append({**src, "stream": streams[stream], "weight": weight, "vector": vec})
    return out


def write_sequence(seq: CompressedSequence, path: str | Path):
    atomic_write(path, sequence_to_bytes(seq))


# ---------------------------------------------------------------------------
# Label files
# ---------------------------------------------------------------------------


def write_labels(records: list[LabelRecord], path: str | Path):
    lines = [
        json.dumps({"text": r.text, "lambda_llm": r.lambda_llm, "lambda_rule": r.lambda_rule, "rho_gt": r.rho_gt},
                   ensure_ascii=False)
        for r in records
    ]
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_labels(path: str | Path, alpha: float = 0.5) -> list[LabelRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = LabelRecord(
                text=obj["text"], lambda_rule=float(obj["lambda_rule"]),
                lambda_llm=None if obj.get("lambda_llm") is None else float(obj["lambda_llm"]),
                alpha=alpha, rho_gt=float(obj["rho_gt"]),
            )
            rec.lambda_gt  # range validation
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# Run configs: one "section.key = value" per line, '#' starts a comment
# ---------------------------------------------------------------------------


def _to_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _from_text(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low not in ("true", "false"):
            raise FormatError(f"expected true/false, got {raw!r}")
        return low == "true"
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def config_to_text(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            for sub in dataclasses.fields(v):
                lines.append(f"{f.name}.{sub.name} = {_to_text(getattr(v, sub.name))}")
        else:
            lines.append(f"{f.name} = {_to_text(v)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base=None):
    """Parse overrides onto ``base`` (default ``RunConfig()``); every section is re-validated."""
    from dualcomp.pipeline import RunConfig

    cfg = base if base is not None else RunConfig()
    top: dict = {}
    nested: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            sub = getattr(cfg, section, None)
            if not dataclasses.is_dataclass(sub) or name not in {f.name for f in dataclasses.fields(sub)}:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            nested.setdefault(section, {})[name] = _from_text(raw, getattr(sub, name))
        else:
            if key not in {f.name for f in dataclasses.fields(cfg)} or dataclasses.is_dataclass(getattr(cfg, key)):
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            top[key] = _from_text(raw, getattr(cfg, key))
    for section, vals in nested.items():
        top[section] = dataclasses.replace(getattr(cfg, section), **vals)
    return dataclasses.replace(cfg, **top)


def load_config(path: str | Path | None):
    from dualcomp.pipeline import RunConfig

    if path is None:
        return RunConfig()
    return config_from_text(Path(path).read_text("utf-8"))
