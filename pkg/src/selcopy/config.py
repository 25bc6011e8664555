"""Run-wide tunables shared by the kernel, protocol programs, and harness."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .bufcore import DEFAULT_FRAG_CAPACITY, DEFAULT_MAX_FRAGS

DEFAULT_LOOKAHEAD = 256
DEFAULT_ANCHOR_THRESHOLD = 3 * 1024 * 1024
DEFAULT_GRACE_PERIOD = 5.0
DEFAULT_SNDBUF = 16 * 1024 * 1024
DEFAULT_RCVBUF = 16 * 1024 * 1024


class KernelMode(Enum):
    BASELINE = "baseline"
    SELECTIVE = "selective"


@dataclass
class KernelConfig:
    mode: KernelMode = KernelMode.SELECTIVE
    frag_capacity: int = DEFAULT_FRAG_CAPACITY
    max_frags: int = DEFAULT_MAX_FRAGS
    lookahead: int = DEFAULT_LOOKAHEAD
    anchor_threshold: int = DEFAULT_ANCHOR_THRESHOLD
    grace_period: float = DEFAULT_GRACE_PERIOD
    sndbuf: int = DEFAULT_SNDBUF
    rcvbuf: int = DEFAULT_RCVBUF
    # deliver queued segments to the peer right after each send/recv; unit
    # tests turn this off to observe intermediate accounting states
    auto_drain: bool = True
    seed: int = 0
    # fault-injection knob: parse bodies but never mint payload tokens, so
    # every transmit that expects one falls back and copies real bytes
    fault_suppress_vpi: bool = False
