"""File formats: PNG images, landmark CSV, transform JSON, .df32 fields."""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import AffineTransform2D

VERSION = "shgreg-v1"


def read_png(path):
    """Read an 8/16-bit grayscale or RGB PNG as floats in [0, 1]."""
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L"):
            a = np.asarray(im, dtype=np.float64) / 65535.0
        elif mode == "I":
            # Pillow widens 16-bit grayscale to 32-bit mode "I" on some builds
            a = np.asarray(im, dtype=np.float64) / 65535.0
        elif mode in ("L", "P", "1"):
            a = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        elif mode in ("RGB", "RGBA", "LA"):
            a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        else:
            raise ValueError(f"unsupported PNG mode {mode!r} in {path}")
    return a


def write_png(path, img, bits=16):
    """Write a [0, 1] grayscale (H, W) or RGB (H, W, 3) image."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2 and bits == 16:
        q = np.round(a * 65535.0).astype(np.uint16)
        Image.fromarray(q).save(path)
    elif bits in (8, 16):
        # Pillow cannot write 16-bit RGB; colour outputs are always 8-bit
        q = np.round(a * 255.0).astype(np.uint8)
        Image.fromarray(q).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def read_landmarks(path):
    pts = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'x,y'")
            pts.append((float(parts[0]), float(parts[1])))
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def write_landmarks(path, pts):
    with open(path, "w", newline="\n") as fh:
        for x, y in np.asarray(pts).reshape(-1, 2):
            fh.write(f"{float(x)!r},{float(y)!r}\n")


def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj))


def read_transform(path):
    with open(path) as fh:
        return AffineTransform2D.from_dict(json.load(fh))


def write_transform(path, t):
    d = t.to_dict()
    d["version"] = VERSION
    write_json(path, d)


def write_df32(path, df):
    """Little-endian float32 field with an 8-byte (u32 height, u32 width) header."""
    df = np.asarray(df)
    h, w = df.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(df, dtype="<f4").tobytes())


def read_df32(path):
    raw = Path(path).read_bytes()
    h, w = struct.unpack("<II", raw[:8])
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w, 2).astype(np.float64)
