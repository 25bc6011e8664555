"""Acceptance suite: the nine headline guarantees of the selective-copy stack.

Each test checks one guarantee end to end.  Every run finishes with an
"acceptance criteria" section holding one PASS/FAIL line per guarantee;
passing tests contribute their measured numbers to that line (see
conftest.record_verdict).
"""

import random
import time

from selcopy.config import (DEFAULT_ANCHOR_THRESHOLD, KernelConfig,
                            KernelMode)
from selcopy.harness import (Exchange, Workload, build_message,
                             compare_transcripts, cost_model_eval,
                             expected_forwarded, gen_workload, request_head,
                             response_head, run_scenario, verify_expected)
from selcopy.http1 import http1_parse_head, message_total_len, encode_chunked
from selcopy.kmp import kmp_search
from selcopy.simkernel import SimKernel, SockLifecycle
from selcopy.vpimap import VPI_LEN

from conftest import record_verdict


def _pass(line: str) -> None:
    record_verdict(line)


def cl_exchange(rng: random.Random, path: bytes, req_len: int,
                resp_len: int, req_extra: bytes = b"") -> Exchange:
    """One request/response pair with content-length framing and random bodies."""
    req = build_message(request_head(path, req_len, False, extra=req_extra),
                        rng.randbytes(req_len))
    resp = build_message(response_head(resp_len, False), rng.randbytes(resp_len))
    return Exchange(req, resp)


def measured_socks(result):
    """(client-facing, backend-facing) proxy sockets of a 1-connection run."""
    ids = sorted(s for s, sock in result.kernel.sockets.items() if sock.measured)
    assert len(ids) == 2
    return ids[0], ids[1]


# 1 ──────────────────────────────────────────────────────────────────────────

def test_a1_cross_mode_byte_equivalence_under_fuzz():
    """1000 randomized workloads produce identical endpoint bytes in both
    modes, including iterations where token issuance is deliberately broken."""
    rng = random.Random(0xA11CE)
    fault_runs = 0
    for i in range(1000):
        wl = gen_workload(seed=rng.randrange(1, 2 ** 31),
                          connections=1,
                          exchanges=rng.randint(1, 2),
                          size_range=(0, rng.randint(64, 3000)),
                          chunked_prob=rng.random() * 0.7)
        fault = (i % 7) == 6
        fault_runs += fault
        base = run_scenario(wl, KernelMode.BASELINE)
        sel = run_scenario(wl, KernelMode.SELECTIVE,
                           cfg=KernelConfig(fault_suppress_vpi=fault))
        assert base.audit_problems == [], f"workload {i}: {base.audit_problems}"
        assert sel.audit_problems == [], f"workload {i}: {sel.audit_problems}"
        div = compare_transcripts(base.transcript, sel.transcript)
        assert div is None, f"workload {i} (fault={fault}): {div}"
        assert verify_expected(wl, sel) is None, f"workload {i}: wrong bytes"
    assert fault_runs >= 100
    _pass(f"byte equivalence: 1000 fuzzed workloads ({fault_runs} with "
          f"token issuance suppressed), zero divergent bytes")


# 2 ──────────────────────────────────────────────────────────────────────────

def test_a2_proxy_sees_metadata_plus_token_only():
    """For untruncated content-length bodies, the proxy's receive buffer gets
    exactly the metadata plus the 8-byte token — and the copy saving against
    the full-copy baseline reaches 4000x at 1 MiB bodies."""
    rng = random.Random(0xB0B)
    convs = [[cl_exchange(rng, f"c{ci}/m{mi}".encode(),
                          rng.randint(8, 60_000), rng.randint(8, 60_000))
              for mi in range(3)] for ci in range(2)]
    wl = Workload(conversations=convs, seed=17)
    sel = run_scenario(wl, KernelMode.SELECTIVE)
    assert sel.audit_problems == []
    recs = sel.kernel.log.rx
    assert len(recs) == 2 * 3 * 2        # every message on both proxy sockets
    for rec in recs:
        assert rec.vpi_bytes == VPI_LEN
        assert rec.payload_copy_bytes == 0
        assert rec.copied_to_user == rec.metadata_bytes + VPI_LEN
    model = cost_model_eval(1 << 20)
    ratio = model["baseline_copied"] / model["selective_copied"]
    assert ratio >= 4000, f"copy-saving ratio only {ratio:.0f}"
    _pass(f"metadata-only delivery: {len(recs)} messages all copied "
          f"metadata+{VPI_LEN}B, copy saving {ratio:.0f}x >= 4000x at 1 MiB")


# 3 ──────────────────────────────────────────────────────────────────────────

def test_a3_anchoring_budget_truncates_then_copies_tail():
    """A 5 MiB body against a 3 MiB anchoring budget anchors exactly the
    budget, literal-copies the 2 MiB tail, and still forwards bit-exactly."""
    rng = random.Random(0xCAFE)
    body_len = 5 * (1 << 20)
    budget = DEFAULT_ANCHOR_THRESHOLD
    assert budget == 3 * (1 << 20)
    wl = Workload(conversations=[[cl_exchange(rng, b"big", 0, body_len)]],
                  seed=29)
    base = run_scenario(wl, KernelMode.BASELINE, cap_range=(32_768, 65_536))
    sel = run_scenario(wl, KernelMode.SELECTIVE, cap_range=(32_768, 65_536))
    assert compare_transcripts(base.transcript, sel.transcript) is None
    assert sel.audit_problems == []
    rx = next(r for r in sel.kernel.log.rx if r.anchored_bytes)
    assert rx.anchored_bytes == budget
    assert rx.payload_copy_bytes == body_len - budget
    tx = next(r for r in sel.kernel.log.tx if r.transferred_bytes)
    assert tx.transferred_bytes == budget
    assert tx.payload_copy_bytes == body_len - budget
    _pass(f"anchoring budget: 5 MiB body anchored exactly {budget} bytes, "
          f"{body_len - budget} literal tail, transcripts identical")


# 4 ──────────────────────────────────────────────────────────────────────────

def test_a4_stress_many_connections_heavy_transfer_volume():
    """64 threaded connections push >100k ownership transfers with zero lock
    discipline violations and bit-exact delivery."""
    rng = random.Random(0xD00D)
    convs = [[cl_exchange(rng, f"c{ci}/m{mi}".encode(), 240_000, 240_000)
              for mi in range(5)] for ci in range(64)]
    wl = Workload(conversations=convs, seed=61)
    res = run_scenario(wl, KernelMode.SELECTIVE, cap_range=(16_384, 65_536),
                       stress=True, watchdog=300.0,
                       cfg=KernelConfig(max_frags=1))
    assert res.audit_problems == []
    assert verify_expected(wl, res) is None
    assert res.lock_violations == 0
    assert res.max_locks_held <= 1
    transfers = res.metrics.meta_skb_trans_count
    assert transfers >= 100_000, f"only {transfers} segment transfers"
    _pass(f"stress: 64 threaded connections, {transfers} segment ownership "
          f"transfers, 0 lock violations, bytes verified")


# 5 ──────────────────────────────────────────────────────────────────────────

def test_a5_memory_accounting_sound_even_with_tiny_buffers():
    """Accounts never underflow and return to zero; a 10-byte send buffer
    still converges because transfers commit whole or not at all."""
    wl = gen_workload(seed=73, connections=2, exchanges=2,
                      size_range=(0, 2500), chunked_prob=0.4)
    runs = []
    for mode in (KernelMode.BASELINE, KernelMode.SELECTIVE):
        res = run_scenario(wl, mode, cap_range=(9, 4096),
                           cfg=KernelConfig(sndbuf=10))
        runs.append(res)
        assert res.audit_problems == []
        for sock in res.kernel.sockets.values():
            for acct in (sock.recv_account, sock.send_account):
                assert acct.underflow_events == 0
                assert acct.charged == 0
                assert acct.temp_raise == 0
    assert compare_transcripts(runs[0].transcript, runs[1].transcript) is None
    # every forwarded byte is accounted to exactly one transmit mechanism
    sel = runs[1]
    n_msgs = sum(2 * len(conv) for conv in wl.conversations)
    assert len(sel.kernel.log.tx) == n_msgs
    moved = sum(r.metadata_bytes + r.transferred_bytes + r.payload_copy_bytes
                for r in sel.kernel.log.tx)
    expected = sum(len(expected_forwarded(ex.request))
                   + len(expected_forwarded(ex.response))
                   for conv in wl.conversations for ex in conv)
    assert moved == expected
    _pass(f"accounting: 0 underflows, all accounts drained to 0 through a "
          f"10-byte send buffer, {moved} bytes conserved across {n_msgs} "
          f"messages")


# 6 ──────────────────────────────────────────────────────────────────────────

def test_a6_deferred_teardown_runs_on_the_virtual_clock():
    """Closing a socket with live anchored payload defers teardown to the
    grace deadline; expiry reclaims tokens — all in virtual time."""
    wall_start = time.monotonic()
    message = (b"POST /t HTTP/1.1\r\nContent-Length: 9000\r\n\r\n" + b"t" * 9000)

    def fresh():
        k = SimKernel(KernelConfig(seed=7, grace_period=5.0))
        c, pc = k.pair(l7_b=True, measured_b=True)
        pb, b = k.pair(l7_a=True, measured_a=True)
        k.sendmsg(c, message)
        buf = bytearray()
        logical = 0
        while logical < len(message):
            r = k.recvmsg(pc, 65_536)
            buf += r.data
            logical += r.logical_len
        return k, pc, pb, b, bytes(buf), logical

    # path 1: the forward finishes inside the grace period, the socket is
    # still only reclaimed at its deadline sweep
    k, pc, pb, b, buf, logical = fresh()
    k.sock_close(pc)
    assert k.sockets[pc].lifecycle == SockLifecycle.DEFERRED
    k.sendmsg(pb, buf, logical)
    assert k.sockets[pc].anchor_refs == 0
    k.clock_advance(4.999)
    assert k.sockets[pc].lifecycle == SockLifecycle.DEFERRED
    k.clock_advance(0.001)
    assert k.sockets[pc].lifecycle == SockLifecycle.CLOSED

    # path 2: grace expires with the payload still anchored; the sweep
    # reclaims the token and the anchors
    k2, pc2, _, _, _, _ = fresh()
    k2.sock_close(pc2)
    assert len(k2.vpimap) == 1
    k2.clock_advance(5.0)
    assert k2.sockets[pc2].lifecycle == SockLifecycle.CLOSED
    assert len(k2.vpimap) == 0
    assert k2.sockets[pc2].anchor_refs == 0

    wall = time.monotonic() - wall_start
    assert wall < 1.0, "teardown must not consume wall-clock time"
    _pass(f"deferred teardown: deadline honored and expiry reclaimed tokens "
          f"on the virtual clock ({wall * 1000:.0f} ms wall time)")


# 7 ──────────────────────────────────────────────────────────────────────────

def test_a7_wire_segment_counts_are_exact():
    """A 1 MiB response moves as exactly ceil(size / segment-capacity)
    segments: the baseline forwards that many and the selective path
    ownership-transfers the same count, for both segment geometries."""
    rng = random.Random(0xF00D)
    checked = []
    for max_frags, seg_cap in ((17, 17 * 1448), (45, 45 * 1448)):
        body_len = 1 << 20
        expect = -(-body_len // seg_cap)  # ceil; heads fit in the slack
        wl = Workload(conversations=[[cl_exchange(rng, b"seg", 0, body_len)]],
                      seed=83)
        cfg = lambda: KernelConfig(max_frags=max_frags)
        base = run_scenario(wl, KernelMode.BASELINE,
                            cap_range=(32_768, 65_536), cfg=cfg())
        sel = run_scenario(wl, KernelMode.SELECTIVE,
                           cap_range=(32_768, 65_536), cfg=cfg())
        assert compare_transcripts(base.transcript, sel.transcript) is None
        pc, _pb = measured_socks(base)
        assert base.per_sock_metrics[pc].segments_forwarded == expect
        assert sel.per_sock_metrics[pc].meta_skb_trans_count == expect
        checked.append(f"{seg_cap}B capacity -> {expect} segments")
    _pass("wire segments exact both modes: " + "; ".join(checked))


# 8 ──────────────────────────────────────────────────────────────────────────

def naive_dechunk(wire: bytes) -> bytes:
    """Reference de-chunker: parse sizes with int(, 16), no cleverness."""
    out, pos = bytearray(), 0
    while True:
        eol = wire.index(b"\r\n", pos)
        size = int(wire[pos:eol].split(b";")[0], 16)
        pos = eol + 2
        if size == 0:
            assert wire[pos:pos + 2] == b"\r\n"
            return bytes(out)
        out += wire[pos:pos + size]
        pos += size + 2


def test_a8_parsers_match_reference_oracles_and_overflow_falls_back():
    """The substring searcher matches bytes.find over 100k cases, the chunked
    walker agrees with a naive de-chunker, and a head larger than the parse
    window drops the connection into permanent literal-copy mode without
    changing a single delivered byte."""
    rng = random.Random(0x5EED)
    for _ in range(100_000):
        text = bytes(rng.choices(b"ab\r\n", k=rng.randint(0, 40)))
        pat = bytes(rng.choices(b"ab\r\n", k=rng.randint(1, 6)))
        assert kmp_search(text, pat) == text.find(pat)

    head = b"POST /c HTTP/1.1\r\nTransfer-Encoding: chunked\r\n\r\n"
    info = http1_parse_head(head)
    for _ in range(2000):
        chunks = [rng.randbytes(rng.randint(1, 50))
                  for _ in range(rng.randint(0, 8))]
        wire = encode_chunked(chunks)
        assert naive_dechunk(wire) == b"".join(chunks)
        assert message_total_len(info, head + wire) == len(head) + len(wire)

    # oversize head: parse window is 256 bytes, this head is ~470
    rng2 = random.Random(0xFA11)
    big_head_ex = cl_exchange(rng2, b"wide", 10_000, 3000,
                              req_extra=b"X-Pad: " + b"p" * 400)
    assert big_head_ex.request.head_len > 256
    normal_ex = cl_exchange(rng2, b"after", 20_000, 3000)
    wl = Workload(conversations=[[big_head_ex, normal_ex]], seed=97)
    base = run_scenario(wl, KernelMode.BASELINE)
    sel = run_scenario(wl, KernelMode.SELECTIVE)
    assert compare_transcripts(base.transcript, sel.transcript) is None
    pc, _pb = measured_socks(sel)
    assert sel.kernel.sockets[pc].rx_state.conn_fallback is True
    assert sel.per_sock_metrics[pc].vpis_issued == 0   # sticky: both messages
    _pass("parsers: searcher == find on 100000 cases, chunk walker == naive "
          "de-chunker on 2000 messages, oversize head fell back literally "
          "with identical bytes")


# 9 ──────────────────────────────────────────────────────────────────────────

def test_a9_copy_cost_scales_with_size_only_in_the_baseline():
    """Growing the body 16x (64 KiB -> 1 MiB) scales baseline copy bytes by
    ~16x, while the selective path's copies and parser invocations do not
    change at all."""
    small = cost_model_eval(64 * 1024)
    big = cost_model_eval(1 << 20)
    ratio = big["baseline_copied"] / small["baseline_copied"]
    assert abs(ratio - 16.0) <= 16.0 * 0.05, f"baseline ratio {ratio:.3f}"
    assert big["selective_copied"] == small["selective_copied"]
    assert big["selective_prog_invocations"] == small["selective_prog_invocations"]
    _pass(f"cost model: baseline copies scaled {ratio:.2f}x for a 16x body, "
          f"selective stayed at {big['selective_copied']} copied bytes and "
          f"{big['selective_prog_invocations']} parser invocations for both")
