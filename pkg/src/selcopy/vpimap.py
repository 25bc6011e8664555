"""Virtual payload identifiers: generation, the global entry map, lookups.

An identifier is an 8-byte keyed-hash token standing in for a message body
whose real bytes stay anchored in a receive queue.  The token itself carries
no address or layout information; resolving it back to its source socket goes
through the map, and a failed lookup is an expected outcome (the transmit
side then falls back to copying), not an error.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from typing import Iterator, Optional

VPI_LEN = 8


class Vpi:
    """8-byte opaque token; serialized little-endian."""

    __slots__ = ("value",)

    def __init__(self, value: int):
        if not 0 <= value < 1 << 64:
            raise ValueError("token out of 64-bit range")
        self.value = value

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(VPI_LEN, "little")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Vpi":
        if len(raw) != VPI_LEN:
            raise ValueError(f"need exactly {VPI_LEN} bytes, got {len(raw)}")
        return cls(int.from_bytes(raw, "little"))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vpi) and self.value == other.value

    def __hash__(self) -> int:
        return hash(self.value)

    def __repr__(self) -> str:
        return f"Vpi({self.value:#018x})"


def vpi_hash(key: bytes, sock_id: int, seq: int, nonce: int = 0) -> Vpi:
    """Keyed 64-bit digest of (socket, sequence, nonce)."""
    msg = struct.pack("<QQQ", sock_id, seq, nonce)
    digest = hashlib.blake2b(msg, key=key, digest_size=VPI_LEN).digest()
    return Vpi.from_bytes(digest)


@dataclass
class VpiEntry:
    """Map record tying a token to its anchored source bytes."""

    vpi: Vpi
    source_sock: int
    anchored_remaining: int
    created_at: float


class VpiMap:
    """Global token -> entry map shared by every socket in a kernel."""

    def __init__(self, key: bytes):
        if len(key) == 0:
            raise ValueError("hash key must be non-empty")
        self._key = key
        self._entries: dict[int, VpiEntry] = {}
        self._seq = 0
        self._mu = threading.Lock()  # map ops must stay atomic under threads

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[VpiEntry]:
        return iter(list(self._entries.values()))

    def generate(self, source_sock: int, anchored_len: int, now: float) -> VpiEntry:
        """Mint a fresh token and register its entry.

        Collisions with live tokens are resolved by bumping the nonce and
        re-hashing, so the returned token is always unique in this map.
        """
        with self._mu:
            self._seq += 1
            nonce = 0
            vpi = vpi_hash(self._key, source_sock, self._seq, nonce)
            while vpi.value in self._entries:
                nonce += 1
                vpi = vpi_hash(self._key, source_sock, self._seq, nonce)
            entry = VpiEntry(vpi=vpi, source_sock=source_sock,
                             anchored_remaining=anchored_len, created_at=now)
            self._entries[vpi.value] = entry
            return entry

    def lookup(self, vpi: Vpi) -> Optional[VpiEntry]:
        """None on a miss; the caller treats that as the copy-fallback signal."""
        return self._entries.get(vpi.value)

    def lookup_raw(self, candidate: bytes) -> Optional[VpiEntry]:
        """Decode 8 stream bytes and look them up; anything else is a miss."""
        if len(candidate) != VPI_LEN:
            return None
        return self._entries.get(int.from_bytes(candidate, "little"))

    def remove(self, vpi: Vpi) -> Optional[VpiEntry]:
        with self._mu:
            return self._entries.pop(vpi.value, None)

    def remove_for_sock(self, sock_id: int) -> list[VpiEntry]:
        """Drop every entry sourced from one socket (teardown sweep)."""
        with self._mu:
            doomed = [e for e in self._entries.values() if e.source_sock == sock_id]
            for e in doomed:
                del self._entries[e.vpi.value]
            return doomed

    def entries_for_sock(self, sock_id: int) -> list[VpiEntry]:
        return [e for e in self._entries.values() if e.source_sock == sock_id]
