"""Per-connection protocol programs: the control plane for both datapaths.

A program never touches buffers itself.  Given a bounded window of unread
receive-queue bytes (or the outgoing user bytes), it returns an ordered list
of data-plane actions — copy these metadata bytes, inject a payload token,
advance the logical cursor, transfer anchored segments — and the kernel
executes them.

The receive machine walks a message as alternating metadata and body spans:
the head (delimited by the blank line, found with a bounded scan), then
either a content-length body, nothing, or chunk-size-line/chunk-body pairs
ending in the terminal chunk.  Bodies of 8+ bytes are anchored in place and
represented to the application by an 8-byte token; the logical read length
still reflects the full original stream.  The transmit machine walks the
same structure over the application's (physically compressed) outgoing
buffer, validating declared lengths against the token map and turning each
live token back into an ownership transfer of the anchored bytes.

Mutation discipline differs by direction.  Receive actions always execute in
full (they only reference bytes and capacity the planner was shown), so
rx_step advances RxConnState inline.  Transmit actions can be cut short by
send-buffer room, so tx_pre is read-only: every cursor move happens in
tx_apply_action as the kernel reports how much of each action really ran,
and parse results ride on the first action of their span as a SpanOpen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .errors import ProtocolDesyncError
from .http1 import HEAD_END, Framing, http1_parse_chunk_header, http1_parse_head
from .kmp import kmp_search
from .vpimap import VPI_LEN, VpiEntry, VpiMap


class RxPhase(Enum):
    DEFAULT = "default"
    METADATA_PARSED = "metadata_parsed"
    WRITE_VPI = "write_vpi"          # transient: covered within one decision
    FAST_PATH = "fast_path"


class TxPhase(Enum):
    DEFAULT = "default"
    METADATA_PARSED = "metadata_parsed"
    FAST_PATH = "fast_path"
    FALLBACK_BYPASS = "fallback_bypass"


# --------------------------------------------------------------------------
# receive-side actions and state
# --------------------------------------------------------------------------

@dataclass
class CopyToUser:
    """Copy n unread queue bytes to the user buffer.

    meta=True marks protocol metadata (selective-copy class); meta=False is
    literal payload riding the full-copy class (tiny bodies, truncation
    tails, fallback traffic).
    """
    n: int
    meta: bool = True


@dataclass
class InjectVpi:
    """Anchor `anchored_len` unread bytes in place and write a fresh 8-byte
    token to the user buffer; the kernel mints the token."""
    anchored_len: int


@dataclass
class SkipLogical:
    """Advance the application-visible cursor over already-anchored bytes."""
    n: int


RxAction = Union[CopyToUser, InjectVpi, SkipLogical]


@dataclass
class RxDecision:
    actions: list[RxAction]
    phase: RxPhase
    logical_len: int          # logical stream progress of this batch
    msg_complete: bool        # current message fully consumed (boundary stop)
    needs_more: bool = False  # parse stalled awaiting bytes
    reinvoke: bool = False    # anchoring shifted the unread window; call again


@dataclass
class RxConnState:
    phase: RxPhase = RxPhase.DEFAULT
    framing: Optional[Framing] = None
    # current metadata span (0 = none delimited yet)
    metadata_len: int = 0
    metadata_copied: int = 0
    span_terminal: bool = False          # this span ends the message
    # current body span
    body_total: int = 0
    body_effective: int = 0              # anchored portion (threshold-capped)
    logical_body_consumed: int = 0
    body_vpi: bool = False
    vpi_written: bool = False
    # message scope
    anchor_budget_left: int = 0
    vpi_issued: bool = False
    msg_complete: bool = False
    msg_logical_len: int = 0
    # connection scope
    conn_fallback: bool = False

    def reset_message(self) -> None:
        self.phase = RxPhase.DEFAULT
        self.framing = None
        self.metadata_len = self.metadata_copied = 0
        self.span_terminal = False
        self.body_total = self.body_effective = self.logical_body_consumed = 0
        self.body_vpi = self.vpi_written = False
        self.anchor_budget_left = 0
        self.vpi_issued = False
        self.msg_complete = False
        self.msg_logical_len = 0


# --------------------------------------------------------------------------
# transmit-side actions and state
# --------------------------------------------------------------------------

@dataclass
class SpanOpen:
    """Parse result attached to the first action of a newly delimited span;
    applied to the connection state when that action starts executing."""
    head_framing: Optional[Framing] = None  # set when this opens the head
    metadata_len: int = 0
    body_declared: int = 0
    terminal: bool = False
    expected_inc: int = 0
    expected_final: bool = False


@dataclass
class TxCopy:
    """Copy n user bytes into the send queue (metadata or literal payload)."""
    n: int
    meta: bool = True
    opens: Optional[SpanOpen] = None
    enters_bypass: bool = False
    enters_fallback: bool = False


@dataclass
class TxExtract:
    """Consume the 8 token bytes from the user stream (no queue effect)."""
    raw: bytes
    opens: Optional[SpanOpen] = None


@dataclass
class TxTransfer:
    """Move `take` anchored bytes from the entry's source socket into this
    socket's send queue; counts `take` logical bytes (the token's 8 stream
    positions stand for the first 8 of them)."""
    entry: VpiEntry
    take: int
    opens: Optional[SpanOpen] = None
    declared_clamped: bool = False  # anchored exceeded the declared span


TxAction = Union[TxCopy, TxExtract, TxTransfer]


@dataclass
class TxDecision:
    actions: list[TxAction]


class TxOutcome(Enum):
    CONTINUE = "continue"
    COMPLETED = "completed"


@dataclass
class TxConnState:
    phase: TxPhase = TxPhase.DEFAULT
    framing: Optional[Framing] = None
    metadata_len: int = 0
    metadata_copied: int = 0
    span_terminal: bool = False
    # current body span
    body_declared: int = 0
    body_logical_sent: int = 0
    body_vpi_checked: bool = False
    active_entry: Optional[VpiEntry] = None  # entry being drained across calls
    # message scope
    expected_total: int = 0
    expected_final: bool = False
    cumulative_sent: int = 0
    source_sock: Optional[int] = None
    consumed_entries: list[VpiEntry] = field(default_factory=list)
    bypass: bool = False
    msg_complete: bool = False
    # connection scope
    conn_fallback: bool = False
    length_warnings: int = 0

    def reset_message(self) -> None:
        self.phase = TxPhase.DEFAULT
        self.framing = None
        self.metadata_len = self.metadata_copied = 0
        self.span_terminal = False
        self.body_declared = self.body_logical_sent = 0
        self.body_vpi_checked = False
        self.active_entry = None
        self.expected_total = 0
        self.expected_final = False
        self.cumulative_sent = 0
        self.source_sock = None
        self.consumed_entries = []
        self.bypass = False
        self.msg_complete = False


# --------------------------------------------------------------------------
# the HTTP/1.x program
# --------------------------------------------------------------------------

class Http1Program:
    """HTTP/1.0-1.1 framing program exposing rx_step / tx_pre / tx_post."""

    def __init__(self, lookahead: int, anchor_threshold: int,
                 issue_vpis: bool = True):
        self.lookahead = lookahead
        self.anchor_threshold = anchor_threshold
        self.issue_vpis = issue_vpis

    # ---------------- receive ----------------

    def rx_step(self, st: RxConnState, window: bytes, unread_total: int,
                capacity: int) -> RxDecision:
        """Plan one batch of receive actions.

        `window` linearizes unread queue bytes, `unread_total` is the full
        unread count, `capacity` the user-buffer room left in this recv call.
        """
        acts: list[RxAction] = []
        cap = capacity
        logical = 0
        phys = 0  # window bytes consumed by planned copies

        def copy(n: int, meta: bool) -> None:
            nonlocal cap, logical, phys
            acts.append(CopyToUser(n, meta))
            cap -= n
            logical += n
            phys += n

        def done(needs_more: bool = False, reinvoke: bool = False) -> RxDecision:
            st.msg_logical_len += logical
            return RxDecision(acts, st.phase, logical, st.msg_complete,
                              needs_more=needs_more, reinvoke=reinvoke)

        if st.conn_fallback:
            n = min(cap, unread_total)
            if n:
                copy(n, meta=False)
            return done()

        while cap > 0 and not st.msg_complete:
            # -- metadata span in flight ------------------------------------
            if st.metadata_len > st.metadata_copied:
                remaining = st.metadata_len - st.metadata_copied
                if st.body_vpi and not st.vpi_written and cap < remaining + VPI_LEN:
                    # cannot fit the rest of the metadata plus the token:
                    # copy what fits and defer the injection
                    if cap:
                        take = min(cap, remaining)
                        copy(take, meta=True)
                        st.metadata_copied += take
                    st.phase = RxPhase.METADATA_PARSED
                    return done()
                take = min(cap, remaining)
                copy(take, meta=True)
                st.metadata_copied += take
                if st.metadata_copied < st.metadata_len:
                    if st.body_vpi:
                        st.phase = RxPhase.METADATA_PARSED
                    return done()
                if st.span_terminal:
                    self._rx_finish_message(st)
                    return done()
                continue

            # -- token injection ---------------------------------------------
            if st.body_vpi and not st.vpi_written:
                if cap < VPI_LEN:
                    # token must land whole; wait for a roomier call
                    st.phase = RxPhase.METADATA_PARSED
                    return done()
                if unread_total - phys < st.body_effective:
                    # the span to anchor has not fully arrived yet
                    st.phase = RxPhase.METADATA_PARSED
                    return done(needs_more=True)
                acts.append(InjectVpi(st.body_effective))
                st.vpi_written = True
                st.vpi_issued = True
                cap -= VPI_LEN
                logical += VPI_LEN
                st.logical_body_consumed = VPI_LEN
                st.phase = RxPhase.FAST_PATH
                if st.logical_body_consumed >= st.body_total:
                    self._rx_finish_body(st)
                # anchoring shifts the unread window: hand the batch back and
                # let the kernel re-invoke against the new front
                return done(reinvoke=not st.msg_complete)

            # -- anchored span: logical skip ---------------------------------
            if st.body_vpi and st.logical_body_consumed < st.body_effective:
                n = min(cap, st.body_effective - st.logical_body_consumed)
                acts.append(SkipLogical(n))
                cap -= n
                logical += n
                st.logical_body_consumed += n
                if st.logical_body_consumed < st.body_effective:
                    return done()
                if st.logical_body_consumed >= st.body_total:
                    self._rx_finish_body(st)
                continue

            # -- literal body bytes (tiny body, or tail past the anchor) -----
            if st.body_total > st.logical_body_consumed:
                avail = unread_total - phys
                n = min(cap, st.body_total - st.logical_body_consumed, avail)
                if n <= 0:
                    return done(needs_more=True)
                copy(n, meta=False)
                st.logical_body_consumed += n
                if st.logical_body_consumed < st.body_total:
                    return done()
                self._rx_finish_body(st)
                continue

            # -- delimit the next metadata span ------------------------------
            view = window[phys:phys + self.lookahead]
            stalled = self._rx_parse_span(st, view, unread_total - phys)
            if st.conn_fallback:
                n = min(cap, unread_total - phys)
                if n:
                    copy(n, meta=False)
                return done()
            if stalled:
                return done(needs_more=True)

        return done()

    def _rx_parse_span(self, st: RxConnState, view: bytes, unread: int) -> bool:
        """Delimit the next metadata span from `view`.

        Returns True when more bytes are needed; flips conn_fallback when the
        delimiter cannot appear within the lookahead window or parsing fails.
        """
        if st.framing is None:
            idx = kmp_search(view, HEAD_END)
            if idx < 0:
                if unread >= self.lookahead:
                    st.conn_fallback = True
                    return False
                return True
            try:
                info = http1_parse_head(view[:idx + len(HEAD_END)])
            except ValueError:
                st.conn_fallback = True
                return False
            assert info is not None
            st.framing = info.framing
            st.metadata_len = info.head_len
            st.metadata_copied = 0
            st.anchor_budget_left = self.anchor_threshold
            if info.framing is Framing.CONTENT_LENGTH:
                self._rx_open_body(st, info.content_length)
            elif info.framing is Framing.NO_BODY:
                st.span_terminal = True
            # chunked: the first size line is its own span, parsed next pass
            return False

        if st.framing is Framing.CHUNKED:
            try:
                parsed = http1_parse_chunk_header(view)
            except ValueError:
                st.conn_fallback = True
                return False
            if parsed is None:
                if unread >= self.lookahead:
                    st.conn_fallback = True
                    return False
                return True
            hdr_len, size = parsed
            st.metadata_copied = 0
            if size == 0:
                # terminal marker plus its closing empty line, all metadata
                st.metadata_len = hdr_len + 2
                st.span_terminal = True
                st.body_total = st.body_effective = 0
                st.body_vpi = False
            else:
                st.metadata_len = hdr_len
                self._rx_open_body(st, size)
            return False

        raise AssertionError("span parse requested in a bodyless framing")

    def _rx_open_body(self, st: RxConnState, size: int) -> None:
        st.body_total = size
        st.logical_body_consumed = 0
        st.vpi_written = False
        effective = min(size, st.anchor_budget_left)
        if self.issue_vpis and size >= VPI_LEN and effective >= VPI_LEN:
            st.body_vpi = True
            st.body_effective = effective
            st.anchor_budget_left -= effective
        else:
            st.body_vpi = False
            st.body_effective = 0

    def _rx_finish_body(self, st: RxConnState) -> None:
        st.body_total = st.body_effective = st.logical_body_consumed = 0
        st.body_vpi = st.vpi_written = False
        if st.framing is Framing.CONTENT_LENGTH:
            self._rx_finish_message(st)
        # chunked: the next size line is parsed on the following pass

    def _rx_finish_message(self, st: RxConnState) -> None:
        st.msg_complete = True
        st.phase = RxPhase.FAST_PATH if st.vpi_issued else RxPhase.DEFAULT

    # ---------------- transmit ----------------

    def tx_pre(self, st: TxConnState, out: bytes, logical_len: int,
               vpimap: VpiMap) -> TxDecision:
        """Plan transmit actions for one send call (read-only on state).

        `out` holds the physically present user bytes from the application's
        cursor; `logical_len` is the stream length it claims to be sending,
        which exceeds len(out) only where tokens stand in for payload.
        """
        acts: list[TxAction] = []
        phys = 0
        logical = 0
        pending_open: Optional[SpanOpen] = None
        pending_bypass = False

        def attach(act: TxAction) -> TxAction:
            nonlocal pending_open, pending_bypass
            if pending_open is not None:
                act.opens = pending_open
                pending_open = None
            if pending_bypass and isinstance(act, TxCopy):
                act.enters_bypass = True
                pending_bypass = False
            acts.append(act)
            return act

        def flush_fallback() -> None:
            n = min(len(out) - phys, logical_len - logical)
            if n:
                act = TxCopy(n, meta=False)
                act.enters_fallback = True
                attach(act)

        if st.conn_fallback:
            n = min(len(out), logical_len)
            if n:
                acts.append(TxCopy(n, meta=False))
            return TxDecision(acts)

        # local mirrors: execution owns the real cursors
        framing = st.framing
        meta_len, meta_copied = st.metadata_len, st.metadata_copied
        terminal = st.span_terminal
        body_declared, body_sent = st.body_declared, st.body_logical_sent
        vpi_checked = st.body_vpi_checked
        active = st.active_entry
        bypass = st.bypass
        complete = st.msg_complete

        while logical < logical_len and not complete:
            if meta_len > meta_copied:
                n = min(meta_len - meta_copied, len(out) - phys, logical_len - logical)
                if n <= 0:
                    break
                attach(TxCopy(n, meta=True))
                phys += n
                logical += n
                meta_copied += n
                if meta_copied < meta_len:
                    break
                if terminal:
                    complete = True
                    break
                continue

            if body_declared > body_sent:
                if bypass or body_declared < VPI_LEN:
                    n = min(body_declared - body_sent, len(out) - phys,
                            logical_len - logical)
                    if n <= 0:
                        break
                    attach(TxCopy(n, meta=False))
                    phys += n
                    logical += n
                    body_sent += n
                    if body_sent < body_declared:
                        break
                elif active is not None and active.anchored_remaining > 0:
                    # continue draining an entry across send calls
                    take = min(active.anchored_remaining,
                               body_declared - body_sent, logical_len - logical)
                    if take <= 0:
                        break
                    attach(TxTransfer(active, take))
                    logical += take
                    body_sent += take
                    if take == active.anchored_remaining:
                        active = None
                    if body_sent < body_declared:
                        if active is not None:
                            break  # logical budget exhausted mid-transfer
                        continue
                elif not vpi_checked:
                    if len(out) - phys < VPI_LEN:
                        break  # defer extraction until the token is whole
                    raw = bytes(out[phys:phys + VPI_LEN])
                    entry = vpimap.lookup_raw(raw)
                    if entry is None:
                        bypass = True
                        pending_bypass = True
                        continue
                    take = min(entry.anchored_remaining,
                               body_declared - body_sent, logical_len - logical)
                    if take <= 0:
                        break
                    attach(TxExtract(raw))
                    attach(TxTransfer(
                        entry, take,
                        declared_clamped=entry.anchored_remaining > body_declared - body_sent))
                    phys += VPI_LEN
                    logical += take
                    vpi_checked = True
                    body_sent += take
                    if take < entry.anchored_remaining:
                        active = entry
                        break  # logical budget exhausted mid-transfer
                    if body_sent < body_declared:
                        continue  # truncation tail rides the copy path below
                else:
                    n = min(body_declared - body_sent, len(out) - phys,
                            logical_len - logical)
                    if n <= 0:
                        break
                    attach(TxCopy(n, meta=False))
                    phys += n
                    logical += n
                    body_sent += n
                    if body_sent < body_declared:
                        break
                # body span complete
                body_declared = body_sent = 0
                vpi_checked = False
                if framing is Framing.CONTENT_LENGTH:
                    complete = True
                continue

            # delimit the next span from the outgoing bytes
            view = bytes(out[phys:phys + self.lookahead])
            if framing is None:
                idx = kmp_search(view, HEAD_END)
                if idx < 0:
                    if len(view) >= self.lookahead:
                        flush_fallback()
                    break
                try:
                    info = http1_parse_head(view[:idx + len(HEAD_END)])
                except ValueError:
                    flush_fallback()
                    break
                assert info is not None
                framing = info.framing
                meta_len, meta_copied = info.head_len, 0
                open_ = SpanOpen(head_framing=framing, metadata_len=meta_len)
                if framing is Framing.CONTENT_LENGTH:
                    body_declared, body_sent = info.content_length, 0
                    open_.body_declared = info.content_length
                    open_.expected_inc = info.head_len + info.content_length
                    open_.expected_final = True
                elif framing is Framing.NO_BODY:
                    terminal = True
                    open_.terminal = True
                    open_.expected_inc = info.head_len
                    open_.expected_final = True
                else:
                    open_.expected_inc = info.head_len
                pending_open = open_
                continue
            if framing is Framing.CHUNKED:
                try:
                    parsed = http1_parse_chunk_header(view)
                except ValueError:
                    flush_fallback()
                    break
                if parsed is None:
                    if len(view) >= self.lookahead:
                        flush_fallback()
                    break
                hdr_len, size = parsed
                if size == 0:
                    meta_len, meta_copied = hdr_len + 2, 0
                    terminal = True
                    pending_open = SpanOpen(metadata_len=meta_len, terminal=True,
                                            expected_inc=meta_len,
                                            expected_final=True)
                else:
                    meta_len, meta_copied = hdr_len, 0
                    body_declared, body_sent = size, 0
                    pending_open = SpanOpen(metadata_len=hdr_len,
                                            body_declared=size,
                                            expected_inc=hdr_len + size)
                continue
            break  # NO_BODY: nothing follows the head

        return TxDecision(acts)

    def tx_post(self, st: TxConnState, accepted_logical: int) -> TxOutcome:
        """Advance the cumulative counter; report message completion.

        The kernel performs map/anchor cleanup and the paired state reset
        when this returns COMPLETED.
        """
        if st.phase is not TxPhase.DEFAULT:
            st.cumulative_sent += accepted_logical
            if st.expected_final and st.cumulative_sent > st.expected_total:
                over = st.cumulative_sent - st.expected_total
                raise ProtocolDesyncError(
                    f"sent {over} logical bytes past the declared message total")
            if st.expected_final and st.cumulative_sent == st.expected_total:
                st.msg_complete = True
        return TxOutcome.COMPLETED if st.msg_complete else TxOutcome.CONTINUE


def tx_open_span(st: TxConnState, open_: SpanOpen) -> None:
    """Install a freshly delimited span into the live state (execution side)."""
    if open_.head_framing is not None:
        st.framing = open_.head_framing
    st.metadata_len = open_.metadata_len
    st.metadata_copied = 0
    st.body_declared = open_.body_declared
    st.body_logical_sent = 0
    st.body_vpi_checked = False
    if open_.terminal:
        st.span_terminal = True
    st.expected_total += open_.expected_inc
    if open_.expected_final:
        st.expected_final = True


def tx_apply_action(st: TxConnState, action: TxAction, n_done: int) -> None:
    """Advance the live cursors for an executed (possibly partial) action.

    n_done is physical bytes for copies, 8 for a full extract, and the
    transferred byte count for a transfer.
    """
    if isinstance(action, TxCopy):
        if action.enters_fallback and n_done > 0:
            st.conn_fallback = True
        if action.enters_bypass and n_done > 0:
            st.bypass = True
            if st.phase in (TxPhase.DEFAULT, TxPhase.METADATA_PARSED):
                st.phase = TxPhase.FALLBACK_BYPASS
        if st.conn_fallback:
            return
        if action.meta:
            st.metadata_copied += n_done
            if (st.metadata_copied >= st.metadata_len and st.span_terminal):
                st.msg_complete = True
            elif n_done and st.phase is TxPhase.DEFAULT and (
                    st.body_declared >= VPI_LEN or st.framing is Framing.CHUNKED):
                st.phase = TxPhase.METADATA_PARSED
        else:
            st.body_logical_sent += n_done
            if st.body_declared and st.body_logical_sent >= st.body_declared:
                _tx_finish_body(st)
    elif isinstance(action, TxExtract):
        if n_done:
            st.body_vpi_checked = True
    elif isinstance(action, TxTransfer):
        if n_done:
            st.phase = TxPhase.FAST_PATH
            st.body_logical_sent += n_done
            if action.entry not in st.consumed_entries:
                st.consumed_entries.append(action.entry)
            st.source_sock = action.entry.source_sock
            if action.declared_clamped:
                st.length_warnings += 1
            # the kernel decremented anchored_remaining before this call
            st.active_entry = action.entry if action.entry.anchored_remaining > 0 else None
            if st.body_declared and st.body_logical_sent >= st.body_declared:
                _tx_finish_body(st)


def _tx_finish_body(st: TxConnState) -> None:
    st.body_declared = st.body_logical_sent = 0
    st.body_vpi_checked = False
    st.active_entry = None
    if st.framing is Framing.CONTENT_LENGTH:
        st.msg_complete = True
