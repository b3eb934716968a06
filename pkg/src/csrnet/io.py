"""PNG planes, line-delimited manifests and atomic file writes."""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def atomic_write(path: str | os.PathLike, data: bytes | str):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_image(path: str | os.PathLike) -> np.ndarray:
    """8-bit PNG as float64: (H, W) for grayscale, (H, W, 3) for colour."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr


def to_uint8(plane: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(plane, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(arr)).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | os.PathLike, arr: np.ndarray):
    """Round to 8 bits and write; (H, W) -> grayscale, (H, W, 3) -> RGB."""
    atomic_write(path, png_bytes(arr))


def manifest_lines(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def read_manifest(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
