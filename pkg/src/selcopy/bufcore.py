"""Segment (skb-analog) buffers, segment queues, and memory accounting.

Payload bytes live in immutable fragments grouped into segments; a segment is
the unit of ownership transfer between sockets.  Queues track both physical
content and the "anchored" prefix: bytes already reported to the application
logically but still resident in the queue.  Moving segments between queues
never duplicates content; only cutting a segment mid-fragment does, and that
duplication is charged to a dedicated split counter, separate from the
kernel/user copy counters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

DEFAULT_FRAG_CAPACITY = 1448  # MSS analog
DEFAULT_MAX_FRAGS = 17        # ingress aggregation limit; 45 models the tuned variant

_seg_ids = itertools.count(1)


class Segment:
    """An immutable run of bytes split into fragments of bounded size."""

    __slots__ = ("seg_id", "frags", "total_len", "frag_capacity", "max_frags")

    def __init__(self, frags: Iterable[bytes], frag_capacity: int = DEFAULT_FRAG_CAPACITY,
                 max_frags: int = DEFAULT_MAX_FRAGS):
        frags = tuple(bytes(f) for f in frags)
        if not frags:
            raise ValueError("segment requires at least one fragment")
        if len(frags) > max_frags:
            raise ValueError(f"{len(frags)} fragments exceed max_frags={max_frags}")
        for f in frags:
            if len(f) == 0:
                raise ValueError("empty fragment")
            if len(f) > frag_capacity:
                raise ValueError(f"fragment of {len(f)} bytes exceeds capacity {frag_capacity}")
        self.seg_id = next(_seg_ids)
        self.frags = frags
        self.total_len = sum(len(f) for f in frags)
        self.frag_capacity = frag_capacity
        self.max_frags = max_frags

    def content(self) -> bytes:
        return b"".join(self.frags)

    def split_at(self, n: int) -> tuple["Segment", "Segment", int]:
        """Split into (first n bytes, remainder).

        Returns the two new segments plus the number of bytes duplicated,
        which is the length of the one fragment cut mid-way (0 when the cut
        lands on a fragment boundary).
        """
        if not 0 < n < self.total_len:
            raise ValueError(f"split point {n} outside (0, {self.total_len})")
        left: list[bytes] = []
        right: list[bytes] = []
        copied = 0
        off = 0
        for f in self.frags:
            if off + len(f) <= n:
                left.append(f)
            elif off >= n:
                right.append(f)
            else:
                cut = n - off
                left.append(f[:cut])
                right.append(f[cut:])
                copied = len(f)
            off += len(f)
        mk = lambda fs: Segment(fs, self.frag_capacity, self.max_frags)
        return mk(left), mk(right), copied

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Segment(id={self.seg_id}, len={self.total_len}, frags={len(self.frags)})"


def segment_build(data: bytes, frag_capacity: int = DEFAULT_FRAG_CAPACITY,
                  max_frags: int = DEFAULT_MAX_FRAGS) -> list[Segment]:
    """Aggregate a byte run into maximal segments (ingress GRO analog).

    Every segment except possibly the last is full: max_frags fragments of
    frag_capacity bytes.  Empty input yields an empty list.
    """
    if frag_capacity < 1 or max_frags < 1:
        raise ValueError("frag_capacity and max_frags must be >= 1")
    segs: list[Segment] = []
    per_seg = frag_capacity * max_frags
    for base in range(0, len(data), per_seg):
        chunk = data[base:base + per_seg]
        frags = [chunk[i:i + frag_capacity] for i in range(0, len(chunk), frag_capacity)]
        segs.append(Segment(frags, frag_capacity, max_frags))
    return segs


class SegmentQueue:
    """Ordered segments plus the anchored prefix marker.

    ``logical_consumed`` counts bytes at the queue front that the application
    has already been told about (logically read) but that still sit here
    physically.  Only those bytes may leave via :meth:`take_anchored_segments`.
    Unread bytes start at offset ``logical_consumed``.
    """

    def __init__(self, split_sink: Optional[Callable[[int], None]] = None):
        self._segs: list[Segment] = []
        self.total_bytes = 0
        self.logical_consumed = 0
        self.max_anchored = 0  # high-water mark, for threshold audits
        self._split_sink = split_sink

    # -- observers ---------------------------------------------------------

    @property
    def segments(self) -> tuple[Segment, ...]:
        return tuple(self._segs)

    @property
    def unread_len(self) -> int:
        return self.total_bytes - self.logical_consumed

    @property
    def anchored_len(self) -> int:
        return self.logical_consumed

    def peek_unread(self, n: int) -> bytes:
        """Linearized view of up to n unread bytes (no state change)."""
        out: list[bytes] = []
        remaining = min(n, self.unread_len)
        skip = self.logical_consumed
        for seg in self._segs:
            if remaining <= 0:
                break
            if skip >= seg.total_len:
                skip -= seg.total_len
                continue
            for f in seg.frags:
                if remaining <= 0:
                    break
                if skip >= len(f):
                    skip -= len(f)
                    continue
                piece = f[skip:skip + remaining]
                skip = 0
                out.append(piece)
                remaining -= len(piece)
        return b"".join(out)

    # -- mutators ----------------------------------------------------------

    def append(self, seg: Segment) -> None:
        self._segs.append(seg)
        self.total_bytes += seg.total_len

    def extend(self, segs: Iterable[Segment]) -> None:
        for seg in segs:
            self.append(seg)

    def skip_unread(self, n: int) -> None:
        """Advance the anchored prefix over n unread bytes (they stay here)."""
        if n < 0 or n > self.unread_len:
            raise ValueError(f"cannot skip {n} of {self.unread_len} unread bytes")
        self.logical_consumed += n
        self.max_anchored = max(self.max_anchored, self.logical_consumed)

    def split_front(self, n: int) -> list[Segment]:
        """Remove exactly the first n physical bytes as segments.

        A segment straddling the cut is split in two; the duplicated fragment
        bytes are reported to the split sink.  Caller is responsible for any
        anchored-prefix bookkeeping.
        """
        if n < 0 or n > self.total_bytes:
            raise ValueError(f"cannot split {n} of {self.total_bytes} bytes")
        taken: list[Segment] = []
        remaining = n
        while remaining > 0:
            seg = self._segs[0]
            if seg.total_len <= remaining:
                taken.append(self._segs.pop(0))
                remaining -= seg.total_len
            else:
                left, right, copied = seg.split_at(remaining)
                if copied and self._split_sink:
                    self._split_sink(copied)
                self._segs[0] = right
                taken.append(left)
                remaining = 0
        self.total_bytes -= n
        return taken

    def take_anchored_segments(self, n: int) -> list[Segment]:
        """Remove n anchored bytes from the front for ownership transfer."""
        if n > self.logical_consumed:
            raise ValueError(f"only {self.logical_consumed} anchored bytes, asked {n}")
        segs = self.split_front(n)
        self.logical_consumed -= n
        return segs

    def take_unread_bytes(self, n: int) -> bytes:
        """Remove and return n unread bytes (the region past the anchored prefix)."""
        if n < 0 or n > self.unread_len:
            raise ValueError(f"cannot take {n} of {self.unread_len} unread bytes")
        if n == 0:
            return b""
        self._normalize_boundary(self.logical_consumed)
        idx = self._index_at(self.logical_consumed)
        self._normalize_boundary(self.logical_consumed + n)
        out: list[bytes] = []
        remaining = n
        while remaining > 0:
            seg = self._segs[idx]
            out.append(seg.content())
            remaining -= seg.total_len
            del self._segs[idx]
        self.total_bytes -= n
        return b"".join(out)

    def take_all(self) -> list[Segment]:
        """Drain the queue completely (transmission path)."""
        segs = self._segs
        self._segs = []
        self.total_bytes = 0
        self.logical_consumed = 0
        return segs

    # -- internals ----------------------------------------------------------

    def _index_at(self, offset: int) -> int:
        """Segment index whose first byte sits at `offset` (must be a boundary)."""
        off = 0
        for i, seg in enumerate(self._segs):
            if off == offset:
                return i
            off += seg.total_len
        if off == offset:
            return len(self._segs)
        raise AssertionError(f"offset {offset} is not a segment boundary")

    def _normalize_boundary(self, offset: int) -> None:
        """Split the segment straddling `offset` so it becomes a boundary."""
        if offset in (0, self.total_bytes):
            return
        off = 0
        for i, seg in enumerate(self._segs):
            end = off + seg.total_len
            if off == offset:
                return
            if off < offset < end:
                left, right, copied = seg.split_at(offset - off)
                if copied and self._split_sink:
                    self._split_sink(copied)
                self._segs[i:i + 1] = [left, right]
                return
            off = end


class AdjustOutcome(Enum):
    OK = "ok"
    OVER_LIMIT = "over_limit"
    UNDERFLOW = "underflow"


@dataclass
class MemoryAccount:
    """Byte budget with an optional temporary raise covering staged transfers."""

    base_limit: int
    charged: int = 0
    temp_raise: int = 0
    underflow_events: int = field(default=0, repr=False)

    @property
    def limit(self) -> int:
        return self.base_limit + self.temp_raise

    @property
    def room(self) -> int:
        return max(0, self.limit - self.charged)

    def adjust(self, delta: int, forced: bool = False) -> AdjustOutcome:
        """Apply a signed delta; reject (state unchanged) when it breaks limits.

        ``forced`` skips the upper limit check only; negative results are an
        underflow regardless, counted and rejected.
        """
        new = self.charged + delta
        if new < 0:
            self.underflow_events += 1
            return AdjustOutcome.UNDERFLOW
        if delta > 0 and not forced and new > self.limit:
            return AdjustOutcome.OVER_LIMIT
        self.charged = new
        return AdjustOutcome.OK


def account_adjust(account: MemoryAccount, delta: int) -> AdjustOutcome:
    """Functional form of :meth:`MemoryAccount.adjust` (strict limits)."""
    return account.adjust(delta)
