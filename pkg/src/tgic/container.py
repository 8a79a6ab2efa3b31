"""On-disk ``.tgic`` bitstream.

Byte layout, all integers big-endian::

    magic      2  b"TG"
    version    1
    height     2
    width      2
    C_y        1
    C_z        1
    tag        4  first bytes of sha256(model_hash + every other byte)
    caption    2 + n   length prefix, UTF-8
    z_payload  varint length + bytes
    y_payload  varint length + bytes

The tag binds the stream to the checkpoint that wrote it and doubles as an
integrity check, so a foreign checkpoint or a tampered payload is rejected
before any symbol is decoded.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .errors import FormatError, InputError

MAGIC = b"TG"
VERSION = 1
TAG_BYTES = 4
_HEAD = struct.Struct(">2sBHHBB")
MAX_CAPTION_BYTES = 0xFFFF


@dataclass(frozen=True)
class Bitstream:
    height: int
    width: int
    latent_channels: int
    hyper_channels: int
    model_hash: bytes
    caption: str
    z_payload: bytes
    y_payload: bytes
    version: int = VERSION

    @property
    def caption_bytes(self) -> int:
        """Bytes charged to the text, length prefix included."""
        return 2 + len(self.caption.encode("utf-8"))


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if pos >= len(data):
            raise FormatError("stream truncated inside a length field")
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7
        if shift > 63:
            raise FormatError("length field too long")


def _tag(model_hash: bytes, head: bytes, body: bytes) -> bytes:
    return hashlib.sha256(model_hash + head + body).digest()[:TAG_BYTES]


def pack_container(bs: Bitstream) -> bytes:
    caption = bs.caption.encode("utf-8")
    if len(caption) > MAX_CAPTION_BYTES:
        raise InputError(f"caption is {len(caption)} bytes, limit {MAX_CAPTION_BYTES}")
    for name, v, hi in (("height", bs.height, 0xFFFF), ("width", bs.width, 0xFFFF),
                        ("C_y", bs.latent_channels, 0xFF), ("C_z", bs.hyper_channels, 0xFF)):
        if not 0 < v <= hi:
            raise InputError(f"{name}={v} does not fit the header")
    head = _HEAD.pack(MAGIC, bs.version, bs.height, bs.width,
                      bs.latent_channels, bs.hyper_channels)
    body = (struct.pack(">H", len(caption)) + caption
            + _varint(len(bs.z_payload)) + bs.z_payload
            + _varint(len(bs.y_payload)) + bs.y_payload)
    return head + _tag(bs.model_hash, head, body) + body


def read_header(data: bytes) -> dict:
    """Unverified header fields; enough to report dimensions."""
    if len(data) < _HEAD.size + TAG_BYTES:
        raise FormatError("stream shorter than its header")
    magic, version, h, w, cy, cz = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported bitstream version {version}")
    return {"version": version, "height": h, "width": w,
            "latent_channels": cy, "hyper_channels": cz}


def unpack_container(data: bytes, model_hash: bytes) -> Bitstream:
    fields = read_header(data)
    head = data[:_HEAD.size]
    tag = data[_HEAD.size:_HEAD.size + TAG_BYTES]
    body = data[_HEAD.size + TAG_BYTES:]
    if _tag(model_hash, head, body) != tag:
        raise FormatError("hash mismatch: stream was written by another model or is corrupted")
    pos = 0
    if len(body) < 2:
        raise FormatError("stream truncated before the caption")
    (n,) = struct.unpack_from(">H", body)
    pos = 2 + n
    if pos > len(body):
        raise FormatError("stream truncated inside the caption")
    try:
        caption = body[2:pos].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"caption is not valid UTF-8: {exc}") from None
    payloads = []
    for _ in range(2):
        n, pos = _read_varint(body, pos)
        if pos + n > len(body):
            raise FormatError("stream truncated inside a payload")
        payloads.append(body[pos:pos + n])
        pos += n
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after the y payload")
    return Bitstream(fields["height"], fields["width"], fields["latent_channels"],
                     fields["hyper_channels"], model_hash, caption, payloads[0], payloads[1],
                     fields["version"])
