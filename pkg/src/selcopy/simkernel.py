"""The simulated kernel data plane.

POSIX-shaped recvmsg/sendmsg/close over in-process socket pairs, with two
interchangeable datapaths: a full-copy baseline, and a selective path that
executes protocol-program decisions — metadata-only copies, token injection,
payload anchoring, and cross-socket segment ownership transfer through an
intermediate staging queue so that no execution context ever holds two
socket locks at once.

The wire between peers is lossless, ordered, and instantaneous; flow control
beyond the socket buffer budgets is out of scope.  Time is virtual: nothing
here ever consults a real clock.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional

from .bufcore import (AdjustOutcome, MemoryAccount, Segment, SegmentQueue,
                      segment_build)
from .config import KernelConfig, KernelMode
from .errors import (AccountOverLimitError, AccountUnderflowError,
                     LockDisciplineError, ProtocolDesyncError,
                     SocketClosedError)
from .metrics import MessageLog, Metrics, RxMessageRecord, TxMessageRecord
from .protoprog import (CopyToUser, Http1Program, InjectVpi, RxConnState,
                        SkipLogical, TxConnState, TxCopy, TxExtract,
                        TxOutcome, TxTransfer, tx_apply_action, tx_open_span)
from .vpimap import VPI_LEN, VpiMap


class LockTracker:
    """Counts, per execution context, how many socket locks are held.

    The transfer path's safety argument is that no context ever holds two;
    the tracker turns that argument into a checked runtime invariant.
    """

    def __init__(self, strict: bool = True):
        self._mu = threading.Lock()
        self._held: dict[int, set[int]] = {}
        self.violations = 0
        self.max_held = 0
        self.acquisitions = 0
        self.strict = strict

    def note_acquire(self, ctx: int, sock_id: int) -> None:
        with self._mu:
            held = self._held.setdefault(ctx, set())
            held.add(sock_id)
            self.acquisitions += 1
            self.max_held = max(self.max_held, len(held))
            if len(held) > 1:
                self.violations += 1
                if self.strict:
                    raise LockDisciplineError(
                        f"context {ctx} holds socket locks {sorted(held)}")

    def note_release(self, ctx: int, sock_id: int) -> None:
        with self._mu:
            self._held.get(ctx, set()).discard(sock_id)


class TrackedLock:
    """A socket lock that reports acquire/release to the tracker."""

    def __init__(self, sock_id: int, tracker: LockTracker):
        self._lock = threading.Lock()
        self._sock_id = sock_id
        self._tracker = tracker

    def __enter__(self) -> "TrackedLock":
        self._lock.acquire()
        self._tracker.note_acquire(threading.get_ident(), self._sock_id)
        return self

    def __exit__(self, *exc) -> None:
        self._tracker.note_release(threading.get_ident(), self._sock_id)
        self._lock.release()


class SockLifecycle:
    OPEN = "open"
    DEFERRED = "deferred_teardown"
    CLOSED = "closed"


@dataclass
class StagingQueue:
    """Segments mid-flight between a receive queue and a send queue."""

    segments: list[Segment]
    total: int
    origin: int


@dataclass
class RecvResult:
    logical_len: int
    data: bytes
    would_block: bool = False

    def __iter__(self):  # allow tuple-style unpacking in handlers
        return iter((self.logical_len, self.data, self.would_block))


@dataclass
class SendResult:
    accepted_logical: int
    consumed_phys: int
    would_block: bool = False


class SimSocket:
    def __init__(self, sock_id: int, cfg: KernelConfig, tracker: LockTracker,
                 l7: bool, measured: bool, split_sink):
        self.sock_id = sock_id
        self.peer: Optional[int] = None
        self.lifecycle = SockLifecycle.OPEN
        self.l7 = l7
        self.measured = measured
        self.lock = TrackedLock(sock_id, tracker)
        self.recv_queue = SegmentQueue(split_sink=split_sink)
        self.send_queue = SegmentQueue(split_sink=split_sink)
        rcv_limit = cfg.rcvbuf
        if l7 and cfg.mode is KernelMode.SELECTIVE:
            # anchoring may legitimately hold up to the threshold in-queue
            rcv_limit = max(rcv_limit, cfg.anchor_threshold)
        self.recv_account = MemoryAccount(base_limit=rcv_limit)
        self.send_account = MemoryAccount(base_limit=cfg.sndbuf)
        self.rx_state = RxConnState()
        self.tx_state = TxConnState()
        self.anchor_refs = 0
        self.teardown_deadline: Optional[float] = None
        self.cur_rx_record: Optional[RxMessageRecord] = None
        self.cur_tx_record: Optional[TxMessageRecord] = None

    def app_callable(self) -> bool:
        return self.lifecycle == SockLifecycle.OPEN


class SimKernel:
    """One kernel instance: a socket table, a token map, and a virtual clock."""

    def __init__(self, cfg: KernelConfig):
        self.cfg = cfg
        self.clock = 0.0
        self.tracker = LockTracker()
        key = (cfg.seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        self.vpimap = VpiMap(key=key)
        self.program = Http1Program(cfg.lookahead, cfg.anchor_threshold,
                                    issue_vpis=not cfg.fault_suppress_vpi)
        self.sockets: dict[int, SimSocket] = {}
        self.metrics: dict[int, Metrics] = {}
        self.log = MessageLog()
        self._log_mu = threading.Lock()
        self._next_sock = 1

    # ---------------- topology ----------------

    def create_socket(self, l7: bool = False, measured: bool = False) -> int:
        sock_id = self._next_sock
        self._next_sock += 1
        metrics = Metrics()
        self.metrics[sock_id] = metrics

        def split_sink(n: int, _m=metrics, _s_id=sock_id):
            if self.sockets[_s_id].measured:
                _m.split_copy_bytes += n

        self.sockets[sock_id] = SimSocket(sock_id, self.cfg, self.tracker,
                                          l7, measured, split_sink)
        return sock_id

    def pair(self, l7_a: bool = False, l7_b: bool = False,
             measured_a: bool = False, measured_b: bool = False) -> tuple[int, int]:
        a = self.create_socket(l7_a, measured_a)
        b = self.create_socket(l7_b, measured_b)
        self.sockets[a].peer = b
        self.sockets[b].peer = a
        return a, b

    def _selective(self, sock: SimSocket) -> bool:
        return self.cfg.mode is KernelMode.SELECTIVE and sock.l7

    # ---------------- receive ----------------

    def recvmsg(self, sock_id: int, user_capacity: int) -> RecvResult:
        if user_capacity < 1:
            raise ValueError("capacity must be at least 1")
        sock = self.sockets[sock_id]
        if not sock.app_callable():
            raise SocketClosedError(f"recv on {sock.lifecycle} socket {sock_id}")
        if self._selective(sock):
            return self._recv_selective(sock, user_capacity)
        return self._recv_plain(sock, user_capacity)

    def _recv_plain(self, sock: SimSocket, capacity: int) -> RecvResult:
        with sock.lock:
            n = min(capacity, sock.recv_queue.unread_len)
            if n == 0:
                return RecvResult(0, b"", would_block=True)
            data = sock.recv_queue.take_unread_bytes(n)
            self._uncharge(sock.recv_account, n)
            if sock.measured:
                m = self.metrics[sock.sock_id]
                m.std_copy_bytes += n
                m.std_alloc_bytes += n
                m.rx_copy_bytes += n
            return RecvResult(n, data)

    def _recv_selective(self, sock: SimSocket, capacity: int) -> RecvResult:
        st = sock.rx_state
        buf = bytearray()
        logical_total = 0
        cap_left = capacity
        m = self.metrics[sock.sock_id]
        with sock.lock:
            while cap_left > 0 and not st.msg_complete:
                if sock.recv_queue.unread_len == 0 and not (
                        st.body_vpi and st.logical_body_consumed < st.body_effective):
                    break
                window = sock.recv_queue.peek_unread(self.cfg.lookahead)
                dec = self.program.rx_step(st, window, sock.recv_queue.unread_len,
                                           cap_left)
                if sock.measured:
                    m.meta_prog_invocations += 1
                if st.conn_fallback is False and sock.cur_rx_record is None and (
                        dec.actions or dec.logical_len):
                    sock.cur_rx_record = RxMessageRecord(sock_id=sock.sock_id)
                rec = sock.cur_rx_record
                if rec is not None:
                    rec.prog_invocations += 1
                for act in dec.actions:
                    if isinstance(act, CopyToUser):
                        data = sock.recv_queue.take_unread_bytes(act.n)
                        self._uncharge(sock.recv_account, act.n)
                        buf += data
                        if sock.measured:
                            m.rx_copy_bytes += act.n
                            if act.meta:
                                m.meta_selcopy_bytes += act.n
                                m.meta_alloc_bytes += act.n
                            else:
                                m.std_copy_bytes += act.n
                                m.std_alloc_bytes += act.n
                        if rec is not None:
                            if act.meta:
                                rec.metadata_bytes += act.n
                            else:
                                rec.payload_copy_bytes += act.n
                    elif isinstance(act, InjectVpi):
                        entry = self.vpimap.generate(sock.sock_id, act.anchored_len,
                                                     self.clock)
                        sock.recv_queue.skip_unread(act.anchored_len)
                        sock.anchor_refs += 1
                        buf += entry.vpi.to_bytes()
                        if sock.measured:
                            m.meta_selcopy_bytes += VPI_LEN
                            m.meta_alloc_bytes += VPI_LEN
                            m.rx_copy_bytes += VPI_LEN
                            m.vpis_issued += 1
                        if rec is not None:
                            rec.vpi_bytes += VPI_LEN
                            rec.anchored_bytes += act.anchored_len
                    elif isinstance(act, SkipLogical):
                        pass  # logical-only: no queue or buffer effect
                logical_total += dec.logical_len
                cap_left -= dec.logical_len
                if dec.msg_complete or not dec.reinvoke:
                    break
            if st.msg_complete:
                if sock.cur_rx_record is not None:
                    with self._log_mu:
                        self.log.rx.append(sock.cur_rx_record)
                    sock.cur_rx_record = None
                if not st.vpi_issued:
                    st.reset_message()  # nothing outstanding: ready for the next
            if st.conn_fallback and sock.cur_rx_record is not None:
                sock.cur_rx_record.fallback = True
        if logical_total == 0:
            return RecvResult(0, b"", would_block=True)
        return RecvResult(logical_total, bytes(buf))

    # ---------------- transmit ----------------

    def sendmsg(self, sock_id: int, data: bytes,
                logical_len: Optional[int] = None) -> SendResult:
        sock = self.sockets[sock_id]
        if not sock.app_callable():
            raise SocketClosedError(f"send on {sock.lifecycle} socket {sock_id}")
        logical = len(data) if logical_len is None else logical_len
        if logical == 0:
            return SendResult(0, 0)
        if self._selective(sock):
            res = self._send_selective(sock, data, logical)
        else:
            if logical != len(data):
                raise ValueError("logical length must match data on this path")
            res = self._send_plain(sock, data)
        if self.cfg.auto_drain:
            self.transmit_drain(sock_id)
        return res

    def _send_plain(self, sock: SimSocket, data: bytes) -> SendResult:
        with sock.lock:
            n = min(len(data), sock.send_account.room)
            if n == 0:
                return SendResult(0, 0, would_block=True)
            self._charge(sock.send_account, n)
            sock.send_queue.extend(segment_build(data[:n], self.cfg.frag_capacity,
                                                 self.cfg.max_frags))
            if sock.measured:
                m = self.metrics[sock.sock_id]
                m.std_copy_bytes += n
                m.tx_copy_bytes += n
            return SendResult(n, n)

    def _send_selective(self, sock: SimSocket, data: bytes,
                        logical_len: int) -> SendResult:
        st = sock.tx_state
        m = self.metrics[sock.sock_id]
        dec = self.program.tx_pre(st, data, logical_len, self.vpimap)
        if sock.measured:
            m.meta_prog_invocations += 1
        if sock.cur_tx_record is None and dec.actions:
            sock.cur_tx_record = TxMessageRecord(sock_id=sock.sock_id)
        rec = sock.cur_tx_record
        accepted_logical = 0
        consumed_phys = 0
        stopped = False
        for act in dec.actions:
            if stopped:
                break
            opens = getattr(act, "opens", None)
            if opens is not None:
                tx_open_span(st, opens)
            if isinstance(act, TxCopy):
                with sock.lock:
                    j = min(act.n, sock.send_account.room)
                    if j > 0:
                        self._charge(sock.send_account, j)
                        chunk = data[consumed_phys:consumed_phys + j]
                        sock.send_queue.extend(segment_build(
                            chunk, self.cfg.frag_capacity, self.cfg.max_frags))
                if j > 0:
                    consumed_phys += j
                    accepted_logical += j
                    if sock.measured:
                        m.tx_copy_bytes += j
                        if act.meta:
                            m.meta_selcopy_bytes += j
                        else:
                            m.std_copy_bytes += j
                    if rec is not None:
                        if act.meta:
                            rec.metadata_bytes += j
                        else:
                            rec.payload_copy_bytes += j
                tx_apply_action(st, act, j)
                if j < act.n:
                    stopped = True
            elif isinstance(act, TxExtract):
                consumed_phys += VPI_LEN
                tx_apply_action(st, act, VPI_LEN)
            elif isinstance(act, TxTransfer):
                staging = self.stage_extract(act.entry.source_sock, act.take)
                n_segs = len(staging.segments)
                self.commit_transfer(staging, sock.sock_id)
                act.entry.anchored_remaining -= act.take
                accepted_logical += act.take
                if sock.measured:
                    m.meta_skb_trans_count += n_segs
                    m.meta_skb_trans_bytes += act.take
                if rec is not None:
                    rec.transferred_bytes += act.take
                    rec.segments_transferred += n_segs
                    rec.fast_path = True
                tx_apply_action(st, act, act.take)
        if rec is not None and (st.bypass or st.conn_fallback):
            rec.fallback = True
        outcome = self.program.tx_post(st, accepted_logical)
        if sock.measured:
            m.meta_prog_invocations += 1
        if outcome is TxOutcome.COMPLETED:
            self._tx_complete(sock)
        if accepted_logical == 0 and consumed_phys == 0:
            return SendResult(0, 0, would_block=len(data) > 0)
        return SendResult(accepted_logical, consumed_phys)

    def _tx_complete(self, sock: SimSocket) -> None:
        """Message fully sent: drop its tokens, release anchors, reset both
        state machines."""
        st = sock.tx_state
        m = self.metrics[sock.sock_id]
        source = st.source_sock
        if source is not None:
            src_sock = self.sockets[source]
            # only one tokenized message is in flight per direction, so every
            # live token minted by the source belongs to the one that just
            # finished — consumed or not, they are all dead now
            removed = self.vpimap.remove_for_sock(source)
            src_sock.anchor_refs -= len(removed)
            if sock.measured:
                m.vpis_removed += len(removed)
            src_sock.rx_state.reset_message()
        if sock.cur_tx_record is not None:
            with self._log_mu:
                self.log.tx.append(sock.cur_tx_record)
            sock.cur_tx_record = None
        st.reset_message()

    # ---------------- ownership transfer ----------------

    def stage_extract(self, recv_sock_id: int, n: int) -> StagingQueue:
        """Pull n anchored bytes out of a receive queue, under only that
        socket's lock, into a free-standing staging queue."""
        sock = self.sockets[recv_sock_id]
        with sock.lock:
            if n > sock.recv_queue.anchored_len:
                raise ProtocolDesyncError(
                    f"asked to stage {n} of {sock.recv_queue.anchored_len} anchored bytes")
            if n == 0:
                return StagingQueue([], 0, recv_sock_id)
            segs = sock.recv_queue.take_anchored_segments(n)
            self._uncharge(sock.recv_account, n)
        return StagingQueue(segs, n, recv_sock_id)

    def commit_transfer(self, staging: StagingQueue, send_sock_id: int) -> None:
        """Append staged segments to a send queue under only that socket's
        lock; the temporary budget raise makes acceptance unconditional."""
        if staging.total == 0:
            return
        sock = self.sockets[send_sock_id]
        with sock.lock:
            sock.send_account.temp_raise += staging.total
            outcome = sock.send_account.adjust(staging.total)
            if outcome is not AdjustOutcome.OK:
                raise AccountOverLimitError(
                    "charge under a matching temp raise cannot fail")
            sock.send_queue.extend(staging.segments)
        staging.segments = []
        staging.total = 0

    # ---------------- wire ----------------

    def transmit_drain(self, sock_id: int) -> int:
        """Hand the whole send queue to the peer's receive queue (the wire is
        instantaneous); uncharge the sender and retire any temp raise."""
        sock = self.sockets[sock_id]
        with sock.lock:
            segs = sock.send_queue.take_all()
            total = sum(s.total_len for s in segs)
            if total == 0:
                return 0
            self._uncharge(sock.send_account, total)
            sock.send_account.temp_raise = max(0, sock.send_account.temp_raise - total)
            if sock.measured:
                self.metrics[sock.sock_id].segments_forwarded += len(segs)
        peer = self.sockets.get(sock.peer) if sock.peer is not None else None
        if peer is None or peer.lifecycle == SockLifecycle.CLOSED:
            return total
        with peer.lock:
            for seg in segs:
                peer.recv_queue.append(seg)
            peer.recv_account.adjust(total, forced=True)
        return total

    # ---------------- lifecycle ----------------

    def sock_close(self, sock_id: int) -> None:
        sock = self.sockets[sock_id]
        if sock.lifecycle == SockLifecycle.CLOSED:
            return
        if sock.lifecycle == SockLifecycle.DEFERRED:
            return
        if sock.anchor_refs > 0:
            sock.lifecycle = SockLifecycle.DEFERRED
            sock.teardown_deadline = self.clock + self.cfg.grace_period
        else:
            self._free_socket(sock)

    def clock_advance(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("virtual time is monotonic")
        self.clock += dt
        due = sorted((s for s in self.sockets.values()
                      if s.lifecycle == SockLifecycle.DEFERRED
                      and s.teardown_deadline is not None
                      and s.teardown_deadline <= self.clock),
                     key=lambda s: s.teardown_deadline)
        for sock in due:
            if sock.anchor_refs > 0:
                # grace expired with payload still anchored: force cleanup
                removed = self.vpimap.remove_for_sock(sock.sock_id)
                if sock.measured:
                    self.metrics[sock.sock_id].vpis_removed += len(removed)
                sock.anchor_refs = 0
                sock.rx_state.reset_message()
            self._free_socket(sock)

    def _free_socket(self, sock: SimSocket) -> None:
        with sock.lock:
            leftover = sock.recv_queue.total_bytes
            if leftover:
                sock.recv_queue.take_all()
                self._uncharge(sock.recv_account, leftover)
            pending = sock.send_queue.total_bytes
            if pending:
                sock.send_queue.take_all()
                self._uncharge(sock.send_account, pending)
                sock.send_account.temp_raise = 0
            sock.lifecycle = SockLifecycle.CLOSED
            sock.teardown_deadline = None

    # ---------------- accounting helpers ----------------

    def _charge(self, account: MemoryAccount, n: int) -> None:
        outcome = account.adjust(n)
        if outcome is AdjustOutcome.OVER_LIMIT:
            raise AccountOverLimitError(f"charge of {n} exceeded a checked limit")

    def _uncharge(self, account: MemoryAccount, n: int) -> None:
        outcome = account.adjust(-n)
        if outcome is AdjustOutcome.UNDERFLOW:
            raise AccountUnderflowError(f"uncharge of {n} below zero")

    # ---------------- audits ----------------

    def audit_quiescent(self) -> list[str]:
        """Invariants that must hold after every completed scenario."""
        problems: list[str] = []
        if len(self.vpimap) != 0:
            problems.append(f"{len(self.vpimap)} token map entries outlive the run")
        for sock in self.sockets.values():
            ra, sa = sock.recv_account, sock.send_account
            for name, acct in (("recv", ra), ("send", sa)):
                if acct.charged != 0:
                    problems.append(
                        f"sock {sock.sock_id} {name} account charged {acct.charged}")
                if acct.temp_raise != 0:
                    problems.append(
                        f"sock {sock.sock_id} {name} account temp raise {acct.temp_raise}")
                if acct.underflow_events:
                    problems.append(
                        f"sock {sock.sock_id} {name} account saw underflows")
            if sock.anchor_refs:
                problems.append(f"sock {sock.sock_id} keeps {sock.anchor_refs} anchors")
        if self.tracker.violations:
            problems.append(f"{self.tracker.violations} double-lock instants")
        return problems

    def total_metrics(self) -> Metrics:
        total = Metrics()
        for sock_id, m in self.metrics.items():
            if self.sockets[sock_id].measured:
                total.add(m)
        return total
