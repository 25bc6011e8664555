"""Minimal HTTP/1.x framing: head parsing, chunk size lines, body length.

Only what a forwarding proxy needs: where the head ends, how the body is
delimited, and how big each chunk is.  Header semantics beyond Content-Length
and Transfer-Encoding are opaque bytes to this code.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

HEAD_END = b"\r\n\r\n"
CRLF = b"\r\n"


class Framing(Enum):
    CONTENT_LENGTH = "content-length"
    CHUNKED = "chunked"
    NO_BODY = "no-body"


@dataclass(frozen=True)
class HeadInfo:
    head_len: int          # includes the blank-line terminator
    framing: Framing
    content_length: int    # 0 unless framing is CONTENT_LENGTH


def http1_parse_head(data: bytes) -> Optional[HeadInfo]:
    """Parse a message head; None while the terminator hasn't arrived yet."""
    end = data.find(HEAD_END)
    if end < 0:
        return None
    head_len = end + len(HEAD_END)
    framing = Framing.NO_BODY
    content_length = 0
    for line in data[:end].split(CRLF)[1:]:
        name, _, value = line.partition(b":")
        name = name.strip().lower()
        value = value.strip()
        if name == b"content-length":
            content_length = int(value)
            framing = Framing.CONTENT_LENGTH
        elif name == b"transfer-encoding" and b"chunked" in value.lower():
            framing = Framing.CHUNKED
    if framing is Framing.CONTENT_LENGTH and content_length == 0:
        framing = Framing.NO_BODY
    return HeadInfo(head_len=head_len, framing=framing, content_length=content_length)


def http1_parse_chunk_header(data: bytes) -> Optional[tuple[int, int]]:
    """Parse a chunk size line, tolerating the CRLF that closes the previous
    chunk's data.

    Returns (header_len, chunk_size) where header_len covers any leading CRLF,
    the hex size (extensions included), and the terminating CRLF.  None while
    the line is still incomplete.
    """
    off = 0
    if data[:2] == CRLF:
        off = 2
    elif data[:1] == b"\r" and len(data) < 2:
        return None
    end = data.find(CRLF, off)
    if end < 0:
        return None
    line = data[off:end]
    size_part = line.split(b";", 1)[0].strip()
    size = int(size_part, 16)
    return end + 2, size


def encode_chunked(chunks: list[bytes]) -> bytes:
    """Wire form of a chunked body; a terminal chunk is always appended."""
    out = bytearray()
    for chunk in chunks:
        if not chunk:
            continue
        out += f"{len(chunk):x}".encode() + CRLF + chunk + CRLF
    out += b"0" + CRLF + CRLF
    return bytes(out)


def message_total_len(head: HeadInfo, data: bytes) -> Optional[int]:
    """Total message length once determinable from buffered bytes.

    For chunked framing this walks size lines until the terminal chunk, so it
    needs all of them present; None until then.
    """
    if head.framing is Framing.NO_BODY:
        return head.head_len
    if head.framing is Framing.CONTENT_LENGTH:
        return head.head_len + head.content_length
    pos = head.head_len
    while True:
        parsed = http1_parse_chunk_header(data[pos:])
        if parsed is None:
            return None
        hdr_len, size = parsed
        pos += hdr_len + size
        if size == 0:
            # trailer-free terminal chunk still ends with one more CRLF
            return pos + 2 if len(data) >= pos + 2 else None
        if pos > len(data):
            return None
