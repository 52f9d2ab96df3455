"""The ``.esc`` container: a fixed 24-byte header followed by one
byte-aligned, MSB-first packed bit sequence per stream.

Header layout (little-endian)::

    magic "ESC1" | version u8 | sample_rate u32 | num_streams u8 |
    frame_groups u32 | product_size u8 | codebook_bits u8 | fingerprint u64

Streams are written in order; inside a stream codes run group-major, product
index minor. Because each stream is padded to a whole byte, a file cut at a
stream boundary is still a valid lower-bitrate file.
"""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

from .csrvq import EncodedPayload

MAGIC = b"ESC1"
VERSION = 1
HEADER = struct.Struct("<4sBIBIBBQ")
HEADER_SIZE = HEADER.size


class BitstreamError(ValueError):
    """Malformed or inconsistent ``.esc`` data."""


class FingerprintMismatch(BitstreamError):
    pass


def stream_nbytes(frame_groups: int, product_size: int, codebook_bits: int) -> int:
    return -(-frame_groups * product_size * codebook_bits // 8)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Write each code as ``bits`` MSB-first bits; zero-pad to a byte."""
    flat = np.asarray(codes, dtype=np.int64).ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= 1 << bits):
        raise BitstreamError(f"code outside [0, 2^{bits})")
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    bitarr = ((flat[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitarr.ravel()).tobytes()


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; nonzero padding bits are rejected."""
    raw = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))
    used = count * bits
    if raw[used:].any():
        raise BitstreamError("nonzero padding bits at end of stream")
    weights = np.int64(1) << np.arange(bits - 1, -1, -1, dtype=np.int64)
    return raw[:used].reshape(count, bits).astype(np.int64) @ weights


def pack(payload: EncodedPayload) -> bytes:
    s, g, l = payload.codes.shape
    if s < 1:
        raise BitstreamError("a payload needs at least one stream")
    if s > 255 or l > 255 or payload.codebook_bits > 255:
        raise BitstreamError("header field overflow")
    head = HEADER.pack(MAGIC, VERSION, payload.sample_rate, s, g, l, payload.codebook_bits, payload.fingerprint)
    body = b"".join(pack_codes(payload.codes[i], payload.codebook_bits) for i in range(s))
    return head + body


def read_header(data: bytes) -> dict:
    if len(data) < HEADER_SIZE:
        raise BitstreamError(f"file is {len(data)} bytes, shorter than the {HEADER_SIZE}-byte header")
    magic, version, sr, s, g, l, bits, fp = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if s < 1 or l < 1 or bits < 1:
        raise BitstreamError(f"invalid header: streams={s} product={l} bits={bits}")
    return {"sample_rate": sr, "num_streams": s, "frame_groups": g, "product_size": l,
            "codebook_bits": bits, "fingerprint": fp}


def unpack(data: bytes, *, lenient: bool = False, expected_fingerprint: int | None = None,
           strict: bool = True) -> EncodedPayload:
    """Parse an ``.esc`` buffer.

    ``lenient`` accepts a body cut short at or inside a stream and returns the
    complete streams only (at least one is required). A fingerprint mismatch
    against ``expected_fingerprint`` raises when ``strict`` and warns
    otherwise.
    """
    h = read_header(data)
    if expected_fingerprint is not None and h["fingerprint"] != expected_fingerprint:
        msg = f"fingerprint {h['fingerprint']:016x} does not match expected {expected_fingerprint:016x}"
        if strict:
            raise FingerprintMismatch(msg)
        warnings.warn(msg, stacklevel=2)
    per = stream_nbytes(h["frame_groups"], h["product_size"], h["codebook_bits"])
    count = h["frame_groups"] * h["product_size"]
    body = len(data) - HEADER_SIZE
    expected = per * h["num_streams"]
    if body > expected:
        raise BitstreamError(f"{body - expected} trailing bytes after offset {HEADER_SIZE + expected}")
    complete = body // per if per else h["num_streams"]
    if body < expected:
        offset = HEADER_SIZE + complete * per
        if not lenient:
            raise BitstreamError(f"truncated: stream {complete} starts at offset {offset} and needs {per} bytes, "
                                 f"file ends at {len(data)}")
        if complete < 1:
            raise BitstreamError(f"truncated inside stream 0 (offset {HEADER_SIZE}, file ends at {len(data)})")
    streams = []
    for i in range(min(complete, h["num_streams"])):
        start = HEADER_SIZE + i * per
        try:
            streams.append(unpack_codes(data[start:start + per], count, h["codebook_bits"]))
        except BitstreamError as e:
            raise BitstreamError(f"stream {i} at offset {start}: {e}") from None
    codes = np.stack(streams).reshape(len(streams), h["frame_groups"], h["product_size"])
    return EncodedPayload(codes, h["fingerprint"], h["codebook_bits"], h["sample_rate"])


def file_size(payload: EncodedPayload) -> int:
    s, g, l = payload.codes.shape
    return HEADER_SIZE + s * stream_nbytes(g, l, payload.codebook_bits)


def bitrate(payload: EncodedPayload, clip_duration_s: float) -> float:
    """Code bits per second in kbps; the header is not counted."""
    if clip_duration_s <= 0:
        raise ValueError("clip duration must be positive")
    return payload.num_bits / clip_duration_s / 1000.0


def write_esc(path: str | Path, payload: EncodedPayload) -> int:
    data = pack(payload)
    Path(path).write_bytes(data)
    return len(data)


def read_esc(path: str | Path, **kw) -> EncodedPayload:
    return unpack(Path(path).read_bytes(), **kw)
