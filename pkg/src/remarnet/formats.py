"""Netpbm (P2/P3/P5/P6) reading and the TNS named-tensor container.

TNS layout, little-endian::

    b"TNS1"  u32 count
    repeat count times:
        u32 name_len  name (utf-8)  u32 ndim  ndim x u32 dims  prod(dims) x f32
"""

import struct

import numpy as np

TNS_MAGIC = b"TNS1"


class FormatError(ValueError):
    """Malformed file; ``field`` names the offending part."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


# ---------------------------------------------------------------- PNM

def _pnm_tokens(data, start, count):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, i, n = [], start, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise FormatError("header", "truncated header")
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        tokens.append(data[i:j])
        i = j
    return tokens, i


def parse_pnm(data):
    """Decode PNM bytes into a float32 array [C, H, W] scaled to [0, 1]."""
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError("magic", f"unsupported magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    tokens, pos = _pnm_tokens(data, 2, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError("header", f"non-integer header fields {tokens!r}") from None
    if width < 1 or height < 1:
        raise FormatError("dimensions", f"invalid size {width}x{height}")
    if not 1 <= maxval <= 255:
        raise FormatError("maxval", f"maxval {maxval} outside 1..255")
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        payload = data[pos + 1:pos + 1 + count]  # exactly one whitespace byte after maxval
        if len(payload) < count:
            raise FormatError("payload", f"truncated payload: expected {count} bytes, got {len(payload)}")
        values = np.frombuffer(payload, dtype=np.uint8).astype(np.float32)
    else:
        raw = []
        for line in data[pos:].splitlines():
            raw.extend(line.split(b"#", 1)[0].split())
        if len(raw) < count:
            raise FormatError("payload", f"truncated payload: expected {count} samples, got {len(raw)}")
        try:
            values = np.array([int(t) for t in raw[:count]], dtype=np.float32)
        except ValueError:
            raise FormatError("payload", "non-integer sample") from None
        if values.max(initial=0) > maxval:
            raise FormatError("payload", "sample exceeds maxval")
    img = (values / np.float32(maxval)).reshape(height, width, channels)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def load_pnm(path):
    with open(path, "rb") as fh:
        return parse_pnm(fh.read())


def encode_pnm(image, magic="P5", maxval=255):
    """Inverse of ``parse_pnm`` for [C,H,W] arrays in [0,1]; handy for fixtures."""
    c, h, w = image.shape
    levels = np.rint(np.clip(image, 0, 1) * maxval).astype(np.int64).transpose(1, 2, 0).reshape(-1)
    header = f"{magic}\n{w} {h}\n{maxval}\n".encode()
    if magic in ("P5", "P6"):
        return header + levels.astype(np.uint8).tobytes()
    return header + " ".join(str(v) for v in levels).encode() + b"\n"


# ---------------------------------------------------------------- TNS

def encode_tns(tensors):
    parts = [TNS_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tns(data):
    if data[:4] != TNS_MAGIC:
        raise FormatError("magic", f"unsupported magic {data[:4]!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(what, f"truncated payload reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "count"))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * size, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(data):
        raise FormatError("trailer", f"{len(data) - pos} unexpected trailing bytes")
    return out


def save_tns(path, tensors):
    with open(path, "wb") as fh:
        fh.write(encode_tns(tensors))


def load_tns(path):
    with open(path, "rb") as fh:
        return decode_tns(fh.read())


def text_to_tensor(text):
    """Store UTF-8 text in a float32 vector (one byte per element)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr):
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).decode("utf-8")
