"""Binary PPM (P6) / PGM (P5) reading and writing for C x H x W float images."""
import os

import numpy as np


class ImageFormatError(ValueError):
    pass


def quantize(img):
    """Map [0, 1] floats to uint8 via round(v * 255)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected 1xHxW or 3xHxW image, got shape {img.shape}")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    body = np.ascontiguousarray(quantize(img).transpose(1, 2, 0)).tobytes()
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + body


def write_pnm(path, img):
    data = encode_pnm(img)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def decode_pnm(data):
    """Decode P5/P6 bytes into a float64 C x H x W array in [0, 1]."""
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM magic {magic!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PNM supported, maxval={maxval}")
    c = 3 if magic == b"P6" else 1
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * c, offset=pos) if len(data) - pos >= h * w * c else None
    if raw is None:
        raise ImageFormatError("truncated PNM pixel data")
    return raw.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pnm(path):
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())
