import io
import struct

import numpy as np
import pytest

from exfilpipe import dynamics, synth
from exfilpipe.dynamics import (
    EmptyTrace,
    ExecTrace,
    Flow,
    MalformedRow,
    NotPcap,
    ScanConfig,
    SyscallEvent,
    UnsupportedLinkType,
    detect_behaviors,
    extract_dns_queries,
    is_private,
    parse_emulation_log,
    parse_flow_csv,
    parse_pc_trace,
    parse_pcap,
    parse_pcap_detailed,
    reconstruct_flows,
)

INTERNAL = synth.DEMO_INTERNAL


# ---------------------------------------------------------------------------
# emulation log

def test_demo_emulog_event_grammar():
    trace = parse_emulation_log(io.StringIO(synth.demo_emulog()))
    assert len(trace.events) == 9
    assert [e.seq for e in trace.events] == list(range(1, 10))
    assert trace.skipped_lines == 0

    first = trace.events[0]
    assert first.name == "openat"
    assert first.args == {"dirfd": "-100", "path": "/etc/watchdog", "flags": "2"}
    assert first.ret == 3

    fork = trace.events[1]
    assert fork.ret == 1377
    assert fork.regs == {"r0": 0x0, "pc": 0x400100}

    ren = trace.events[2]
    assert ren.name == "rename"
    assert ren.args == {"old": "/tmp/dvr.arm", "new": "/usr/dvrHelper"}


def test_emulog_hex_args_become_decimal_strings():
    trace = parse_emulation_log(io.StringIO("[1] mmap(addr=0x400000, len=0x1000) = 0x400000\n"))
    ev = trace.events[0]
    assert ev.args == {"addr": "4194304", "len": "4096"}
    assert ev.ret == 0x400000


def test_emulog_unescapes_quoted_strings():
    trace = parse_emulation_log(io.StringIO('[1] write(path="a\\"b\\\\c") = 0\n'))
    assert trace.events[0].args["path"] == 'a"b\\c'


def test_emulog_renumbers_by_appearance():
    trace = parse_emulation_log(io.StringIO("[7] close(fd=3) = 0\n[9] close(fd=4) = 0\n"))
    assert [e.seq for e in trace.events] == [1, 2]


def test_emulog_counts_unparseable_lines():
    text = "# header comment\n\n[1] open(path=\"/x\") = 3\nqiling: mapped region\n[2] close(fd=3)\n"
    trace = parse_emulation_log(io.StringIO(text), source="emu.txt")
    assert len(trace.events) == 2
    assert trace.skipped_lines == 1
    assert trace.source == "emu.txt"
    assert trace.events[1].ret is None


def test_emulog_empty_raises():
    with pytest.raises(EmptyTrace):
        parse_emulation_log(io.StringIO("# only a comment\n\n"))


def test_pc_trace_hotspots():
    trace = parse_pc_trace(io.StringIO(synth.demo_pc_trace()))
    assert len(trace.samples) == 11
    assert trace.samples[0] == (1, 0x400000)
    assert trace.hotspots[0x400008] == 3


def test_pc_trace_bad_line_reports_position():
    with pytest.raises(MalformedRow) as err:
        parse_pc_trace(io.StringIO("0x400000\nnot-a-pc\n"))
    assert "line 2" in str(err.value)


def test_flow_csv_round_trip():
    trace = parse_flow_csv(io.StringIO(synth.demo_flow_csv()))
    assert len(trace.samples) == 5
    assert trace.samples[1] == (2, 0x400030)
    assert trace.hotspots[0x400030] == 2


@pytest.mark.parametrize("text,where", [
    ("1,0x400000\n", "line 1"),           # missing header
    ("seq,pc\n1,2,3\n", "line 2"),        # extra column
    ("seq,pc\nx,0x400000\n", "line 2"),   # bad seq
])
def test_flow_csv_malformed(text, where):
    with pytest.raises(MalformedRow) as err:
        parse_flow_csv(io.StringIO(text))
    assert where in str(err.value)


# ---------------------------------------------------------------------------
# pcap decoding

def test_demo_capture_shape():
    cap = parse_pcap_detailed(synth.demo_capture())
    assert cap.meta.version == (2, 4)
    assert cap.meta.linktype == dynamics.LINKTYPE_ETHERNET
    assert cap.meta.byte_swapped is False
    assert cap.truncated_records == 0
    assert len(cap.records) == 824
    assert parse_pcap(synth.demo_capture()) == list(cap.records)


def test_swapped_capture_decodes_identically():
    normal = parse_pcap_detailed(synth.demo_capture())
    swapped = parse_pcap_detailed(synth.demo_capture(swapped=True))
    assert swapped.meta.byte_swapped is True
    assert swapped.records == normal.records


def test_tcp_fields_round_trip():
    seg = synth.build_tcp(40000, 9001, seq=77, flags=0x18, payload=b"hello")
    frame = synth.build_eth(synth.build_ipv4("10.0.0.1", "10.0.0.2", 6, seg))
    rec = parse_pcap(synth.build_pcap([(5, 250_000, frame)]))[0]
    assert rec.ts == pytest.approx(5.25)
    assert (rec.ip.src, rec.ip.dst, rec.ip.proto) == ("10.0.0.1", "10.0.0.2", 6)
    assert (rec.l4.sport, rec.l4.dport, rec.l4.seq) == (40000, 9001, 77)
    assert rec.l4.flags == 0x18
    assert rec.l4.payload == b"hello"
    assert rec.l4.payload_len == 5


def test_ip_options_shift_l4_offset():
    seg = synth.build_tcp(1, 2, payload=b"x")
    frame = synth.build_eth(synth.build_ipv4("10.0.0.1", "10.0.0.2", 6, seg,
                                             options=b"\x01\x01\x01\x01"))
    rec = parse_pcap(synth.build_pcap([(0, 0, frame)]))[0]
    assert rec.ip.ihl == 24
    assert rec.l4.payload == b"x"


def test_dns_query_and_response():
    q = synth.build_udp(33000, 53, synth.build_dns_query(7, "probe.example"))
    r = synth.build_udp(53, 33000, synth.build_dns_response(7, "probe.example", "203.0.113.9"))
    frames = [
        (0, 0, synth.build_eth(synth.build_ipv4(INTERNAL, "198.51.100.53", 17, q))),
        (0, 1, synth.build_eth(synth.build_ipv4("198.51.100.53", INTERNAL, 17, r))),
    ]
    recs = parse_pcap(synth.build_pcap(frames))
    assert recs[0].dns.qname == "probe.example"
    assert recs[0].dns.is_response is False
    assert recs[0].dns.qtype == 1
    assert recs[1].dns.is_response is True


def test_dns_pointer_loop_terminates():
    # question name is a compression pointer aimed at itself
    payload = struct.pack("!HHHHHH", 1, 0x0100, 1, 0, 0, 0) + b"\xc0\x0c"
    frame = synth.build_eth(synth.build_ipv4(INTERNAL, "198.51.100.53", 17,
                                             synth.build_udp(1000, 53, payload)))
    rec = parse_pcap(synth.build_pcap([(0, 0, frame)]))[0]
    assert rec.dns is not None
    assert rec.dns.qname is None


def test_fragment_has_no_l4():
    frame = synth.build_eth(synth.build_ipv4("10.0.0.1", "10.0.0.2", 6, b"\x00" * 8,
                                             frag_offset=8))
    rec = parse_pcap(synth.build_pcap([(0, 0, frame)]))[0]
    assert rec.ip is not None
    assert rec.ip.frag_offset == 8
    assert rec.l4 is None


def test_non_ip_and_short_frames():
    frames = [
        (0, 0, synth.build_eth(b"\x00" * 28, ethertype=0x0806)),
        (0, 1, b"\x01\x02\x03"),
    ]
    recs = parse_pcap(synth.build_pcap(frames))
    assert recs[0].eth is not None and recs[0].ip is None
    assert recs[1].eth is None and recs[1].ip is None


def test_trailing_partial_record_counts_truncated():
    frame = synth.build_eth(synth.build_ipv4("10.0.0.1", "10.0.0.2", 6,
                                             synth.build_tcp(1, 2)))
    data = synth.build_pcap([(0, 0, frame), (0, 1, frame)])
    cap = parse_pcap_detailed(data[:-10])
    assert len(cap.records) == 1
    assert cap.truncated_records == 1


def test_caplen_beyond_snaplen_stops_parse():
    frame = b"\x00" * 40
    data = synth.build_pcap([(0, 0, frame)], snaplen=16)
    cap = parse_pcap_detailed(data)
    assert cap.records == ()
    assert cap.truncated_records == 1


def test_caplen_beyond_origlen_stops_parse():
    frame = b"\x00" * 20
    data = bytearray(synth.build_pcap([(0, 0, frame)]))
    struct.pack_into("<I", data, 24 + 12, 4)  # shrink origlen below caplen
    cap = parse_pcap_detailed(bytes(data))
    assert cap.records == ()
    assert cap.truncated_records == 1


def test_pcapng_rejected():
    blob = dynamics.PCAPNG_MAGIC_BYTES + b"\x00" * 60
    with pytest.raises(NotPcap):
        parse_pcap_detailed(blob)


def test_unknown_magic_and_short_header_rejected():
    with pytest.raises(NotPcap):
        parse_pcap_detailed(b"\xde\xad\xbe\xef" + b"\x00" * 40)
    with pytest.raises(NotPcap):
        parse_pcap_detailed(b"\xd4\xc3\xb2\xa1")


def test_non_ethernet_linktype_rejected():
    header = struct.pack("<IHHiIII", dynamics.PCAP_MAGIC, 2, 4, 0, 0, 65535, 101)
    with pytest.raises(UnsupportedLinkType):
        parse_pcap_detailed(header)


# ---------------------------------------------------------------------------
# flows

def test_demo_flow_count_and_conservation():
    records = parse_pcap(synth.demo_capture())
    flows = reconstruct_flows(records)
    assert len(flows) == 577
    counted = [r for r in records if r.ip is not None and r.l4 is not None]
    assert sum(f.packets for f in flows) == len(counted) == 824
    assert sum(f.bytes for f in flows) == sum(r.l4.payload_len for r in counted)


def test_flow_directionality():
    a = synth.build_eth(synth.build_ipv4("10.0.0.1", "10.0.0.2", 6,
                                         synth.build_tcp(5000, 80, flags=0x18,
                                                         payload=b"0123456789")))
    b = synth.build_eth(synth.build_ipv4("10.0.0.2", "10.0.0.1", 6,
                                         synth.build_tcp(80, 5000, flags=0x18,
                                                         payload=b"0123456")))
    flows = reconstruct_flows(parse_pcap(synth.build_pcap([(0, 0, a), (1, 0, b)])))
    assert len(flows) == 1
    flow = flows[0]
    assert flow.initiator == ("10.0.0.1", 5000)
    assert flow.responder == ("10.0.0.2", 80)
    assert flow.packets == 2
    assert flow.bytes == 17
    assert flow.bytes_out == 10
    assert flow.duration == pytest.approx(1.0)
    assert flow.syn_only is False


def test_flow_key_orders_octets_numerically():
    flow = Flow(initiator=("10.0.0.2", 1), responder=("9.0.0.1", 2), proto=6,
                packets=1, bytes=0, bytes_out=0, first_ts=0.0, last_ts=0.0,
                syn_only=True)
    a, b, proto = flow.key
    assert a == ("9.0.0.1", 2)
    assert b == ("10.0.0.2", 1)
    assert proto == 6


def test_syn_only_resets_on_data_segment():
    syn = synth.build_eth(synth.build_ipv4("10.0.0.1", "8.8.8.8", 6,
                                           synth.build_tcp(1, 23, flags=0x02)))
    data = synth.build_eth(synth.build_ipv4("10.0.0.1", "8.8.8.8", 6,
                                            synth.build_tcp(1, 23, flags=0x18,
                                                            payload=b"z")))
    only_syn = reconstruct_flows(parse_pcap(synth.build_pcap([(0, 0, syn)])))
    assert only_syn[0].syn_only is True
    mixed = reconstruct_flows(parse_pcap(synth.build_pcap([(0, 0, syn), (0, 1, data)])))
    assert mixed[0].syn_only is False


def test_empty_capture_yields_no_flows():
    assert reconstruct_flows(parse_pcap(synth.build_pcap([]))) == []


def test_flow_conservation_on_random_captures():
    rng = np.random.default_rng(20)

    def rand_ip():
        return ".".join(str(int(v)) for v in rng.integers(1, 255, size=4))

    for _ in range(50):
        frames = []
        for k in range(int(rng.integers(0, 40))):
            ts = (int(rng.integers(0, 100)), int(rng.integers(0, 1_000_000)))
            kind = int(rng.integers(0, 6))
            if kind == 0:
                frames.append((*ts, synth.build_eth(b"\x00" * 30, ethertype=0x0806)))
            elif kind == 1:
                frames.append((*ts, b"\x00" * int(rng.integers(0, 14))))
            elif kind == 2:
                payload = bytes(rng.integers(0, 256, size=int(rng.integers(0, 50))).tolist())
                seg = synth.build_tcp(int(rng.integers(1, 65535)), int(rng.integers(1, 1024)),
                                      flags=int(rng.integers(0, 256)), payload=payload)
                frames.append((*ts, synth.build_eth(synth.build_ipv4(rand_ip(), rand_ip(), 6, seg))))
            elif kind == 3:
                payload = bytes(rng.integers(0, 256, size=int(rng.integers(0, 50))).tolist())
                dgram = synth.build_udp(int(rng.integers(1, 65535)), int(rng.integers(1, 1024)), payload)
                frames.append((*ts, synth.build_eth(synth.build_ipv4(rand_ip(), rand_ip(), 17, dgram))))
            elif kind == 4:
                frames.append((*ts, synth.build_eth(synth.build_ipv4(rand_ip(), rand_ip(), 6,
                                                                     b"\x00" * 8, frag_offset=16))))
            else:
                frames.append((*ts, synth.build_eth(synth.build_ipv4(rand_ip(), rand_ip(), 1,
                                                                     b"\x00" * 8))))
        records = parse_pcap(synth.build_pcap(frames))
        flows = reconstruct_flows(records)
        counted = [r for r in records if r.ip is not None and r.l4 is not None]
        assert sum(f.packets for f in flows) == len(counted)
        assert sum(f.bytes for f in flows) == sum(r.l4.payload_len for r in counted)


# ---------------------------------------------------------------------------
# dns extraction

def test_demo_dns_queries():
    records = parse_pcap(synth.demo_capture())
    queries = extract_dns_queries(records)
    assert [q.name for q in queries] == list(synth.DEMO_DNS_NAMES)
    assert all(q.resolver == synth.DEMO_RESOLVER and q.port == 53 for q in queries)


def test_dns_queries_deduplicate():
    q = synth.build_udp(33000, 53, synth.build_dns_query(7, "probe.example"))
    frame = synth.build_eth(synth.build_ipv4(INTERNAL, "198.51.100.53", 17, q))
    records = parse_pcap(synth.build_pcap([(0, 0, frame), (0, 1, frame)]))
    assert len(extract_dns_queries(records)) == 1


# ---------------------------------------------------------------------------
# behaviors

@pytest.mark.parametrize("ip,expected", [
    ("10.1.2.3", True),
    ("172.16.0.1", True),
    ("172.31.255.255", True),
    ("172.32.0.1", False),
    ("192.168.5.5", True),
    ("127.0.0.1", True),
    ("169.254.10.10", True),
    ("8.8.8.8", False),
    ("203.0.113.5", False),
    ("not-an-ip", False),
])
def test_is_private(ip, expected):
    assert is_private(ip) is expected


def _event(seq, name, **args):
    return SyscallEvent(seq=seq, name=name,
                        args={k: str(v) for k, v in args.items()}, regs={}, ret=0)


def _trace(*events):
    return ExecTrace(events=tuple(events))


def _flow(dst, dport, *, proto=dynamics.PROTO_TCP, syn_only=False, bytes_out=0,
          duration=0.0):
    return Flow(initiator=(INTERNAL, 40000), responder=(dst, dport), proto=proto,
                packets=1, bytes=bytes_out, bytes_out=bytes_out, first_ts=0.0,
                last_ts=duration, syn_only=syn_only)


def test_demo_behavior_summary():
    trace = parse_emulation_log(io.StringIO(synth.demo_emulog()))
    records = parse_pcap(synth.demo_capture())
    flows = reconstruct_flows(records)
    dns = extract_dns_queries(records)
    summary = detect_behaviors(trace, flows, dns)

    assert summary.masquerade_renames == (
        dynamics.MasqueradeRename(old="/tmp/dvr.arm", new="/usr/dvrHelper", event_seq=3),)
    assert summary.credential_accesses == (
        dynamics.CredentialAccess(path="/etc/shadow", event_seq=4),)
    assert len(summary.dns_queries) == 3

    assert len(summary.scan_findings) == 1
    finding = summary.scan_findings[0]
    assert finding.port == 23
    assert finding.unique_addrs == 120
    assert finding.flow_count == 120

    assert [t[:2] for t in summary.outbound_tcp] == [
        (synth.DEMO_TCP_SINK, 9001 + i) for i in range(4)]
    assert all(t[2] == 128 for t in summary.outbound_tcp)

    channels = {c.channel for c in summary.exfil_candidates}
    assert channels == {"dns", "tcp"}
    dns_cand = [c for c in summary.exfil_candidates if c.channel == "dns"]
    assert dns_cand[0].destination == f"{synth.DEMO_RESOLVER}:53"
    assert len(dns_cand[0].evidence) == 3


def test_scan_threshold_gates_finding():
    flows = [_flow(f"203.0.113.{i % 250 + 1}", 23, syn_only=True) for i in range(120)]
    at_default = detect_behaviors(None, flows, [])
    assert at_default.scan_findings and at_default.scan_findings[0].unique_addrs == 120
    strict = detect_behaviors(None, flows, [], ScanConfig(unique_threshold=121))
    assert strict.scan_findings == ()
    exact = detect_behaviors(None, flows, [], ScanConfig(unique_threshold=120))
    assert len(exact.scan_findings) == 1


def test_scan_ignores_private_and_long_flows():
    private = [_flow(f"192.168.2.{i + 1}", 23, syn_only=True) for i in range(200)]
    assert detect_behaviors(None, private, []).scan_findings == ()
    slow = [_flow(f"203.0.113.{i + 1}", 23, duration=5.0) for i in range(200)]
    assert detect_behaviors(None, slow, []).scan_findings == ()


def test_masquerade_requires_system_destination():
    ok = _trace(_event(1, "rename", old="/tmp/x", new="/usr/bin/x"))
    assert detect_behaviors(ok, [], []).masquerade_renames[0].new == "/usr/bin/x"
    stays_tmp = _trace(_event(1, "rename", old="/tmp/x", new="/tmp/y"))
    assert detect_behaviors(stays_tmp, [], []).masquerade_renames == ()
    same = _trace(_event(1, "rename", old="/usr/x", new="/usr/x"))
    assert detect_behaviors(same, [], []).masquerade_renames == ()


def test_masquerade_positional_arguments():
    trace = _trace(_event(2, "renameat2", a="/tmp/payload", b="/sbin/httpd"))
    found = detect_behaviors(trace, [], []).masquerade_renames
    assert found == (dynamics.MasqueradeRename(old="/tmp/payload", new="/sbin/httpd",
                                               event_seq=2),)


def test_credential_paths_and_dedup():
    trace = _trace(
        _event(1, "open", path="/etc/passwd"),
        _event(2, "read", path="/home/admin/.ssh/id_rsa"),
        _event(3, "open", path="/etc/passwd"),
        _event(4, "stat", path="/var/log/messages"),
    )
    found = detect_behaviors(trace, [], []).credential_accesses
    assert [c.path for c in found] == ["/etc/passwd", "/home/admin/.ssh/id_rsa"]
    assert [c.event_seq for c in found] == [1, 2]


def test_external_dns_only():
    queries = [dynamics.DnsQuery(name="a.example", resolver="192.168.1.1", port=53),
               dynamics.DnsQuery(name="b.example", resolver="198.51.100.53", port=53)]
    summary = detect_behaviors(None, [], queries)
    assert [q.name for q in summary.dns_queries] == ["b.example"]


def test_udp_exfil_candidate_uses_other_channel():
    flows = [_flow("198.51.100.99", 4444, proto=dynamics.PROTO_UDP, bytes_out=64)]
    summary = detect_behaviors(None, flows, [])
    assert [c.channel for c in summary.exfil_candidates] == ["other"]
    assert summary.exfil_candidates[0].destination == "198.51.100.99:4444"


def test_outbound_tcp_sorted_and_filtered():
    flows = [
        _flow("198.51.100.20", 443, bytes_out=10),
        _flow("198.51.100.9", 443, bytes_out=5),
        _flow("198.51.100.9", 80, bytes_out=5),
        _flow("192.168.1.9", 80, bytes_out=50),     # private
        _flow("198.51.100.30", 23, syn_only=True),  # probe, no payload
        _flow("198.51.100.31", 9000),               # nothing sent
    ]
    got = detect_behaviors(None, flows, []).outbound_tcp
    assert got == (("198.51.100.9", 80, 5), ("198.51.100.9", 443, 5),
                   ("198.51.100.20", 443, 10))
