"""Knuth-Morris-Pratt substring matching, batch and streaming forms.

The streaming matcher keeps only the automaton state between calls, so a
delimiter can be found across arbitrarily fragmented input without buffering
previously scanned bytes.
"""

from __future__ import annotations

from typing import Optional


def kmp_build(pattern: bytes) -> list[int]:
    """Failure table: table[i] = length of the longest proper prefix of
    pattern[:i+1] that is also its suffix."""
    if not pattern:
        raise ValueError("empty pattern")
    table = [0] * len(pattern)
    k = 0
    for i in range(1, len(pattern)):
        while k > 0 and pattern[i] != pattern[k]:
            k = table[k - 1]
        if pattern[i] == pattern[k]:
            k += 1
        table[i] = k
    return table


def kmp_search(text: bytes, pattern: bytes) -> int:
    """Index of the first occurrence of pattern in text, or -1."""
    table = kmp_build(pattern)
    k = 0
    for i, b in enumerate(text):
        while k > 0 and b != pattern[k]:
            k = table[k - 1]
        if b == pattern[k]:
            k += 1
        if k == len(pattern):
            return i - len(pattern) + 1
    return -1


class KmpMatcher:
    """Incremental matcher over a byte stream."""

    def __init__(self, pattern: bytes):
        self.pattern = pattern
        self.table = kmp_build(pattern)
        self.state = 0
        self.consumed = 0

    def reset(self) -> None:
        self.state = 0
        self.consumed = 0

    def feed(self, chunk: bytes) -> Optional[int]:
        """Scan chunk; on a match return the stream offset one past its end.

        The matcher stops consuming at the match, so ``consumed`` then equals
        the returned offset and unscanned bytes stay with the caller.
        """
        for i, b in enumerate(chunk):
            while self.state > 0 and b != self.pattern[self.state]:
                self.state = self.table[self.state - 1]
            if b == self.pattern[self.state]:
                self.state += 1
            self.consumed += 1
            if self.state == len(self.pattern):
                self.state = 0
                return self.consumed
        return None
