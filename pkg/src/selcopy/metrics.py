"""Copy/allocation accounting and per-message event records.

Counters distinguish the full-copy datapath (std_*) from the metadata-only
one (meta_*), and both from segment-splitting duplication, which happens in
either mode whenever a read boundary cuts a fragment.  The report surface is
the eight-column row produced by :meth:`Metrics.report_row`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

REPORT_COLUMNS = (
    "std_copy_bytes",
    "std_alloc_bytes",
    "meta_selcopy_bytes",
    "meta_alloc_bytes",
    "meta_prog_invocations",
    "meta_skb_trans_count",
    "split_copy_bytes",
    "segments_forwarded",
)


@dataclass
class Metrics:
    """Monotonic counters for one measured socket (or an aggregate of them)."""

    # full-copy mode
    std_copy_bytes: int = 0        # kernel<->user payload copies
    std_alloc_bytes: int = 0       # user buffers populated by those copies
    # selective mode
    meta_selcopy_bytes: int = 0    # metadata + placeholder bytes copied
    meta_alloc_bytes: int = 0      # user buffer bytes populated selectively
    meta_prog_invocations: int = 0 # protocol-program steps executed
    meta_skb_trans_count: int = 0  # segments moved by ownership transfer
    # mode-independent
    split_copy_bytes: int = 0      # duplication from mid-fragment cuts
    segments_forwarded: int = 0    # segments sent on the wire

    # extra visibility, not part of the report row
    meta_skb_trans_bytes: int = 0
    vpis_issued: int = 0
    vpis_removed: int = 0
    rx_copy_bytes: int = 0         # directional slices of the copy counters
    tx_copy_bytes: int = 0

    def add(self, other: "Metrics") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def report_row(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in REPORT_COLUMNS}

    def snapshot(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RxMessageRecord:
    """What the receive path did for one application message."""

    sock_id: int
    metadata_bytes: int = 0
    vpi_bytes: int = 0          # 0 or 8
    payload_copy_bytes: int = 0 # body bytes physically copied (full-copy / fallback)
    anchored_bytes: int = 0
    prog_invocations: int = 0
    fallback: bool = False

    @property
    def copied_to_user(self) -> int:
        return self.metadata_bytes + self.vpi_bytes + self.payload_copy_bytes


@dataclass
class TxMessageRecord:
    """What the transmit path did for one application message."""

    sock_id: int
    metadata_bytes: int = 0
    transferred_bytes: int = 0  # ownership transfer, no copy
    payload_copy_bytes: int = 0 # fallback / truncated-tail copies
    segments_transferred: int = 0
    prog_invocations: int = 0
    fast_path: bool = False
    fallback: bool = False

    @property
    def copied_from_user(self) -> int:
        return self.metadata_bytes + self.payload_copy_bytes


@dataclass
class MessageLog:
    """Chronological message records for the measured sockets of a scenario."""

    rx: list[RxMessageRecord] = field(default_factory=list)
    tx: list[TxMessageRecord] = field(default_factory=list)
