"""selcopy: a deterministic model of selective-copy socket I/O.

L7 intermediaries receive protocol metadata plus an 8-byte payload token;
the payload itself stays anchored in kernel-side segment queues and moves
between sockets by ownership transfer instead of user-space copies.
"""

from .bufcore import (DEFAULT_FRAG_CAPACITY, DEFAULT_MAX_FRAGS, MemoryAccount,
                      Segment, SegmentQueue, segment_build)
from .config import (DEFAULT_ANCHOR_THRESHOLD, DEFAULT_LOOKAHEAD, KernelConfig,
                     KernelMode)
from .metrics import Metrics, REPORT_COLUMNS
from .simkernel import RecvResult, SendResult, SimKernel
from .vpimap import VPI_LEN, Vpi, VpiMap

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_ANCHOR_THRESHOLD",
    "DEFAULT_FRAG_CAPACITY",
    "DEFAULT_LOOKAHEAD",
    "DEFAULT_MAX_FRAGS",
    "KernelConfig",
    "KernelMode",
    "MemoryAccount",
    "Metrics",
    "REPORT_COLUMNS",
    "RecvResult",
    "Segment",
    "SegmentQueue",
    "SendResult",
    "SimKernel",
    "VPI_LEN",
    "Vpi",
    "VpiMap",
    "segment_build",
    "__version__",
]
