"""End-to-end scenario driver: client -> proxy -> backend over two socket
pairs, with the proxy's sockets running the L7 fast path.

The proxy is deliberately ordinary application code: it reads a message,
splices one `Via:` line into the head, and writes the result out — it never
learns which datapath mode it is running under.  Equivalence between modes
is judged on the byte streams the endpoints observe.

Handlers are written once, as generators that yield when a socket would
block.  The deterministic scheduler round-robins them in one thread; stress
mode drives each generator from its own thread instead.
"""

from __future__ import annotations

import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .config import KernelConfig, KernelMode
from .errors import WatchdogTimeout
from .http1 import encode_chunked
from .metrics import Metrics
from .simkernel import SimKernel

VIA_LINE = b"Via: 1.1 relay\r\n"

# ---------------------------------------------------------------------------
# workloads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MessageSpec:
    """One HTTP/1.1 message in wire form plus the facts handlers need."""

    raw: bytes
    head_len: int
    body: bytes
    chunked: bool = False

    @property
    def wire_len(self) -> int:
        return len(self.raw)


@dataclass(frozen=True)
class Exchange:
    request: MessageSpec
    response: MessageSpec


@dataclass
class Workload:
    """Per-connection conversations, all derived from one seed."""

    conversations: list[list[Exchange]]
    seed: int


def build_message(head: bytes, body: bytes, chunked: bool = False,
                  chunk_sizes: Optional[list[int]] = None) -> MessageSpec:
    if chunked:
        chunks = []
        pos = 0
        for size in chunk_sizes or [len(body)]:
            chunks.append(body[pos:pos + size])
            pos += size
        if pos < len(body):
            chunks.append(body[pos:])
        raw = head + encode_chunked(chunks)
    else:
        raw = head + body
    return MessageSpec(raw=raw, head_len=len(head), body=body, chunked=chunked)


def request_head(path: bytes, body_len: int, chunked: bool,
                 extra: bytes = b"") -> bytes:
    lines = [b"POST /" + path + b" HTTP/1.1", b"Host: sim.example"]
    if chunked:
        lines.append(b"Transfer-Encoding: chunked")
    elif body_len:
        lines.append(b"Content-Length: " + str(body_len).encode())
    else:
        lines[0] = b"GET /" + path + b" HTTP/1.1"
        lines.append(b"Content-Length: 0")
    if extra:
        lines.append(extra.rstrip(b"\r\n"))
    return b"\r\n".join(lines) + b"\r\n\r\n"


def response_head(body_len: int, chunked: bool, extra: bytes = b"") -> bytes:
    lines = [b"HTTP/1.1 200 OK", b"Server: simstack"]
    if chunked:
        lines.append(b"Transfer-Encoding: chunked")
    else:
        lines.append(b"Content-Length: " + str(body_len).encode())
    if extra:
        lines.append(extra.rstrip(b"\r\n"))
    return b"\r\n".join(lines) + b"\r\n\r\n"


def _pick_body_len(rng: random.Random, lo: int, hi: int) -> int:
    """Mix of sizes that exercises every datapath branch: empty, sub-token,
    token-boundary, around one fragment, around one segment, and large."""
    roll = rng.random()
    if roll < 0.08:
        return 0
    if roll < 0.20:
        return rng.randint(1, 7)
    if roll < 0.30:
        return rng.randint(8, 64)
    if roll < 0.45:
        return rng.randint(1400, 1500)
    if roll < 0.60:
        return rng.randint(24_500, 24_800)
    return rng.randint(lo, hi)


def _chunk_sizes(rng: random.Random, total: int) -> list[int]:
    sizes = []
    left = total
    while left > 0:
        n = min(left, rng.choice([3, rng.randint(1, 40), rng.randint(100, 9000)]))
        sizes.append(n)
        left -= n
    return sizes


def gen_workload(seed: int, connections: int = 1, exchanges: int = 4,
                 size_range: tuple[int, int] = (30_000, 300_000),
                 chunked_prob: float = 0.3) -> Workload:
    rng = random.Random(seed)
    convs = []
    for ci in range(connections):
        conv = []
        for mi in range(exchanges):
            path = f"c{ci}/m{mi}".encode()

            req_len = _pick_body_len(rng, *size_range)
            req_chunked = req_len > 0 and rng.random() < chunked_prob
            req_body = rng.randbytes(req_len)
            req = build_message(
                request_head(path, req_len, req_chunked), req_body,
                req_chunked, _chunk_sizes(rng, req_len) if req_chunked else None)

            resp_len = _pick_body_len(rng, *size_range)
            resp_chunked = resp_len > 0 and rng.random() < chunked_prob
            resp_body = rng.randbytes(resp_len)
            resp = build_message(
                response_head(resp_len, resp_chunked), resp_body,
                resp_chunked, _chunk_sizes(rng, resp_len) if resp_chunked else None)

            conv.append(Exchange(req, resp))
        convs.append(conv)
    return Workload(conversations=convs, seed=seed)


def rewrite_head(buf: bytes) -> bytes:
    """The proxy's one L7 action: add a Via line right after the start line.

    Works on the received user buffer as-is, so in selective mode everything
    past the metadata (tokens included) is passed through untouched.
    """
    eol = buf.index(b"\r\n") + 2
    return buf[:eol] + VIA_LINE + buf[eol:]


def expected_forwarded(msg: MessageSpec) -> bytes:
    """What an endpoint should observe after the proxy's rewrite."""
    return rewrite_head(msg.raw)


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------


@dataclass
class ConnSockets:
    client: int
    proxy_client: int
    proxy_backend: int
    backend: int


@dataclass
class Progress:
    """Shared liveness counter; the scheduler uses it to detect deadlock."""

    count: int = 0

    def tick(self) -> None:
        self.count += 1


def pump_send(kernel: SimKernel, sock: int, data: bytes, logical: int,
              progress: Progress) -> Iterator[None]:
    sent = 0
    buf = data
    while sent < logical:
        res = kernel.sendmsg(sock, buf, logical - sent)
        if res.accepted_logical == 0 and res.consumed_phys == 0:
            yield
            continue
        progress.tick()
        sent += res.accepted_logical
        buf = buf[res.consumed_phys:]


def pump_recv(kernel: SimKernel, sock: int, logical_total: int,
              rng: random.Random, cap_range: tuple[int, int],
              progress: Progress):
    """Read exactly one logical message; returns the user-visible bytes."""
    got = bytearray()
    logical = 0
    while logical < logical_total:
        cap = min(rng.randint(*cap_range), logical_total - logical)
        res = kernel.recvmsg(sock, cap)
        if res.would_block:
            yield
            continue
        progress.tick()
        got += res.data
        logical += res.logical_len
    return bytes(got)


def client_handler(kernel: SimKernel, socks: ConnSockets,
                   conv: list[Exchange], rng: random.Random,
                   cap_range: tuple[int, int], progress: Progress,
                   sink: list[bytes]) -> Iterator[None]:
    for ex in conv:
        yield from pump_send(kernel, socks.client, ex.request.raw,
                             ex.request.wire_len, progress)
        resp = yield from pump_recv(
            kernel, socks.client, ex.response.wire_len + len(VIA_LINE),
            rng, cap_range, progress)
        sink.append(resp)


def backend_handler(kernel: SimKernel, socks: ConnSockets,
                    conv: list[Exchange], rng: random.Random,
                    cap_range: tuple[int, int], progress: Progress,
                    sink: list[bytes]) -> Iterator[None]:
    for ex in conv:
        req = yield from pump_recv(
            kernel, socks.backend, ex.request.wire_len + len(VIA_LINE),
            rng, cap_range, progress)
        sink.append(req)
        yield from pump_send(kernel, socks.backend, ex.response.raw,
                             ex.response.wire_len, progress)


def proxy_handler(kernel: SimKernel, in_sock: int, out_sock: int,
                  message_lens: list[int], rng: random.Random,
                  cap_range: tuple[int, int],
                  progress: Progress) -> Iterator[None]:
    """One forwarding direction: read a whole message, rewrite, send on."""
    for wire_len in message_lens:
        buf = yield from pump_recv(kernel, in_sock, wire_len, rng, cap_range,
                                   progress)
        out = rewrite_head(buf)
        yield from pump_send(kernel, out_sock, out, wire_len + len(VIA_LINE),
                             progress)


# ---------------------------------------------------------------------------
# scenario driver
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    mode: KernelMode
    backend_rx: list[list[bytes]]   # per connection, per request
    client_rx: list[list[bytes]]    # per connection, per response
    metrics: Metrics
    per_sock_metrics: dict[int, Metrics]
    audit_problems: list[str]
    lock_violations: int
    max_locks_held: int
    kernel: SimKernel = field(repr=False, default=None)

    @property
    def transcript(self) -> bytes:
        """Flat endpoint-observed byte stream, for whole-run comparisons."""
        parts = []
        for conn in self.backend_rx:
            parts.extend(conn)
        for conn in self.client_rx:
            parts.extend(conn)
        return b"".join(parts)


def _run_deterministic(generators: list[Iterator[None]],
                       progress: Progress) -> None:
    live: deque[Iterator[None]] = deque(generators)
    while live:
        before = progress.count
        finished = []
        for gen in live:
            try:
                next(gen)
            except StopIteration:
                finished.append(gen)
        for gen in finished:
            live.remove(gen)
        if live and progress.count == before and not finished:
            raise RuntimeError(
                f"deadlock: {len(live)} handlers blocked with no progress")


def _run_threaded(generators: list[Iterator[None]], timeout: float) -> None:
    errors: list[BaseException] = []
    errors_mu = threading.Lock()

    def drive(gen: Iterator[None]) -> None:
        try:
            for _ in gen:
                time.sleep(0)  # blocked: give other handlers the GIL
        except BaseException as exc:  # surface in the main thread
            with errors_mu:
                errors.append(exc)

    threads = [threading.Thread(target=drive, args=(g,), daemon=True)
               for g in generators]
    deadline = time.monotonic() + timeout
    for t in threads:
        t.start()
    for t in threads:
        t.join(max(0.0, deadline - time.monotonic()))
    stuck = [t for t in threads if t.is_alive()]
    if stuck:
        raise WatchdogTimeout(f"{len(stuck)} handlers still running after "
                              f"{timeout:.0f}s")
    if errors:
        raise errors[0]


def run_scenario(workload: Workload, mode: KernelMode,
                 cap_range: tuple[int, int] = (9, 65_536),
                 stress: bool = False, watchdog: float = 120.0,
                 cfg: Optional[KernelConfig] = None) -> ScenarioResult:
    if cfg is None:
        cfg = KernelConfig()
    cfg.mode = mode
    if cfg.seed == 0:
        cfg.seed = workload.seed or 1
    kernel = SimKernel(cfg)

    n = len(workload.conversations)
    all_socks: list[ConnSockets] = []
    backend_rx: list[list[bytes]] = [[] for _ in range(n)]
    client_rx: list[list[bytes]] = [[] for _ in range(n)]
    progress = Progress()
    generators: list[Iterator[None]] = []

    for ci, conv in enumerate(workload.conversations):
        c, pc = kernel.pair(l7_b=True, measured_b=True)
        pb, b = kernel.pair(l7_a=True, measured_a=True)
        socks = ConnSockets(c, pc, pb, b)
        all_socks.append(socks)

        # per-role rngs depend only on the workload seed and the role, so
        # both modes see identical capacity draws
        def role_rng(role: str) -> random.Random:
            return random.Random(f"{workload.seed}/{ci}/{role}")

        req_lens = [ex.request.wire_len for ex in conv]
        resp_lens = [ex.response.wire_len for ex in conv]
        generators.append(client_handler(
            kernel, socks, conv, role_rng("client"), cap_range, progress,
            client_rx[ci]))
        generators.append(proxy_handler(
            kernel, socks.proxy_client, socks.proxy_backend, req_lens,
            role_rng("proxy-req"), cap_range, progress))
        generators.append(proxy_handler(
            kernel, socks.proxy_backend, socks.proxy_client, resp_lens,
            role_rng("proxy-resp"), cap_range, progress))
        generators.append(backend_handler(
            kernel, socks, conv, role_rng("backend"), cap_range, progress,
            backend_rx[ci]))

    if stress:
        _run_threaded(generators, watchdog)
    else:
        _run_deterministic(generators, progress)

    for socks in all_socks:
        for sock in (socks.client, socks.proxy_client, socks.proxy_backend,
                     socks.backend):
            kernel.sock_close(sock)
    kernel.clock_advance(cfg.grace_period + 1.0)

    return ScenarioResult(
        mode=mode,
        backend_rx=backend_rx,
        client_rx=client_rx,
        metrics=kernel.total_metrics(),
        per_sock_metrics={sid: m for sid, m in kernel.metrics.items()},
        audit_problems=kernel.audit_quiescent(),
        lock_violations=kernel.tracker.violations,
        max_locks_held=kernel.tracker.max_held,
        kernel=kernel,
    )


# ---------------------------------------------------------------------------
# equivalence checking
# ---------------------------------------------------------------------------


@dataclass
class Divergence:
    offset: int
    context_a: bytes
    context_b: bytes

    def __str__(self) -> str:
        return (f"first divergence at byte {self.offset}: "
                f"{self.context_a!r} != {self.context_b!r}")


def compare_transcripts(a: bytes, b: bytes) -> Optional[Divergence]:
    """None when equal; otherwise the earliest differing offset with context."""
    if a == b:
        return None
    limit = min(len(a), len(b))
    if a[:limit] == b[:limit]:
        off = limit  # one stream is a strict prefix of the other
    else:
        lo, hi = 0, limit
        while lo < hi:  # bisect for the first mismatch
            mid = (lo + hi) // 2
            if a[:mid] == b[:mid]:
                lo = mid + 1
            else:
                hi = mid
        off = lo - 1
    start = max(0, off - 16)
    return Divergence(off, a[start:off + 16], b[start:off + 16])


def verify_expected(workload: Workload, result: ScenarioResult) -> Optional[Divergence]:
    """Check endpoint bytes against the workload's own prediction."""
    expect_parts = []
    for conv in workload.conversations:
        for ex in conv:
            expect_parts.append(expected_forwarded(ex.request))
    for conv in workload.conversations:
        for ex in conv:
            expect_parts.append(expected_forwarded(ex.response))
    return compare_transcripts(b"".join(expect_parts), result.transcript)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def copied_bytes(metrics: Metrics, mode: KernelMode) -> int:
    """User-boundary bytes actually copied on the measured (proxy) sockets."""
    if mode is KernelMode.BASELINE:
        return metrics.std_copy_bytes
    return metrics.meta_selcopy_bytes + metrics.std_copy_bytes


def _padded_head(base: Callable[[bytes], bytes], target_len: int) -> bytes:
    """Pad a head to an exact byte length, absorbing digit-count drift in
    Content-Length so different body sizes share identical head lengths."""
    bare = base(b"")
    need = target_len - len(bare) - len(b"X-Pad: \r\n")
    if need < 1:
        raise ValueError(f"head target {target_len} too small ({len(bare)} bare)")
    head = base(b"X-Pad: " + b"p" * need)
    assert len(head) == target_len
    return head


def cost_model_eval(body_len: int, seed: int = 7,
                    head_len: int = 200) -> dict[str, int]:
    """One fixed-shape exchange measured in both modes.

    Heads are padded to a constant length so runs at different body sizes
    differ only in payload volume.
    """
    req = build_message(
        _padded_head(lambda pad: request_head(b"cost", body_len, False,
                                              extra=pad), head_len),
        random.Random(seed).randbytes(body_len))
    resp = build_message(
        _padded_head(lambda pad: response_head(body_len, False, extra=pad),
                     head_len),
        random.Random(seed + 1).randbytes(body_len))
    workload = Workload([[Exchange(req, resp)]], seed=seed)
    out: dict[str, int] = {"body_len": body_len}
    for mode in (KernelMode.BASELINE, KernelMode.SELECTIVE):
        res = run_scenario(workload, mode,
                           cap_range=(2 ** 24, 2 ** 24))
        if res.audit_problems:
            raise AssertionError(f"audit failed: {res.audit_problems}")
        div = verify_expected(workload, res)
        if div is not None:
            raise AssertionError(f"{mode.value} transcript wrong: {div}")
        out[f"{mode.value}_copied"] = copied_bytes(res.metrics, mode)
        out[f"{mode.value}_prog_invocations"] = res.metrics.meta_prog_invocations
    return out
