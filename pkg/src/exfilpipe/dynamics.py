"""Dynamic-analysis artifact ingestion and behavioral indicators.

Consumes the sandbox's output files: the emulation log (one syscall-style
event per line), program-counter traces (plain or CSV), and classic pcap
captures (Ethernet II / IPv4 / TCP+UDP, DNS over port 53). Reconstructs
canonical bidirectional flows and distills the breach-relevant behaviors:
binary masquerading, DNS lookups to external resolvers, port scanning, and
outbound TCP with payload.

Emulation-log record grammar (one event per line; ret and regs optional):
    [<seq>] <name>(<key>=<value>{, <key>=<value>}) = <ret> | regs{<r>=<hex>{, <r>=<hex>}}
Values are double-quoted strings, decimal integers, or 0x-hex integers.
Unparseable lines are skipped and counted, never fatal.
"""

from __future__ import annotations

import ipaddress
import re
import struct
from dataclasses import dataclass, field

from .errors import PipelineError


class EmptyTrace(PipelineError):
    """An emulation log produced zero events; almost always the wrong file."""


class MalformedRow(PipelineError):
    """A PC-trace row could not be parsed (reported with its line number)."""


class NotPcap(PipelineError):
    """Capture bytes lack the classic pcap magic."""


class UnsupportedLinkType(PipelineError):
    """Capture uses a link type other than Ethernet."""


# ---------------------------------------------------------------------------
# emulation log

_EVENT_RE = re.compile(
    r"^\[(\d+)\]\s+([A-Za-z_]\w*)\((.*)\)"
    r"(?:\s*=\s*(-?0x[0-9a-fA-F]+|-?\d+))?"
    r"(?:\s*\|\s*regs\{([^}]*)\})?\s*$")

_ARG_RE = re.compile(r'([A-Za-z_]\w*)\s*=\s*("(?:[^"\\]|\\.)*"|-?0x[0-9a-fA-F]+|-?\d+)')

_REG_RE = re.compile(r"([A-Za-z_]\w*)\s*=\s*(0x[0-9a-fA-F]+|-?\d+)")


@dataclass(frozen=True)
class SyscallEvent:
    seq: int
    name: str
    args: dict[str, str]
    regs: dict[str, int]
    ret: int | None


@dataclass(frozen=True)
class ExecTrace:
    events: tuple[SyscallEvent, ...]
    source: str = ""
    skipped_lines: int = 0


def _normalize_value(raw: str) -> str:
    if raw.startswith('"'):
        body = raw[1:-1]
        return body.replace('\\"', '"').replace("\\\\", "\\")
    if raw.lower().startswith("0x") or raw.lower().startswith("-0x"):
        return str(int(raw, 16))
    return str(int(raw))


def parse_emulation_log(stream, source: str | None = None) -> ExecTrace:
    """Parse the emulation log; events are numbered by appearance (1-based)."""
    if source is None:
        source = getattr(stream, "name", "")
    events: list[SyscallEvent] = []
    skipped = 0
    for line in stream:
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _EVENT_RE.match(stripped)
        if m is None:
            skipped += 1
            continue
        _raw_seq, name, arg_text, ret_text, reg_text = m.groups()
        args = {k: _normalize_value(v) for k, v in _ARG_RE.findall(arg_text)}
        regs = {}
        if reg_text:
            regs = {k: int(v, 16) if v.lower().startswith("0x") else int(v)
                    for k, v in _REG_RE.findall(reg_text)}
        ret = None
        if ret_text is not None:
            ret = int(ret_text, 16) if "0x" in ret_text.lower() else int(ret_text)
        events.append(SyscallEvent(seq=len(events) + 1, name=name, args=args,
                                   regs=regs, ret=ret))
    if not events:
        raise EmptyTrace(f"no events parsed from {source or 'stream'}")
    return ExecTrace(events=tuple(events), source=source, skipped_lines=skipped)


# ---------------------------------------------------------------------------
# PC traces

@dataclass(frozen=True)
class PcTrace:
    samples: tuple[tuple[int, int], ...]
    hotspots: dict[int, int]


def _parse_pc_value(text: str) -> int:
    text = text.strip()
    if text.lower().startswith("0x"):
        return int(text, 16)
    return int(text)


def parse_pc_trace(stream) -> PcTrace:
    """One 0x-hex or decimal PC per line; blank lines skipped."""
    samples: list[tuple[int, int]] = []
    hotspots: dict[int, int] = {}
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text:
            continue
        try:
            pc = _parse_pc_value(text)
        except ValueError as exc:
            raise MalformedRow(f"line {lineno}: {text!r} is not an address") from exc
        samples.append((len(samples) + 1, pc))
        hotspots[pc] = hotspots.get(pc, 0) + 1
    return PcTrace(samples=tuple(samples), hotspots=hotspots)


def parse_flow_csv(stream) -> PcTrace:
    """CSV with header "seq,pc"; pc values hex or decimal."""
    samples: list[tuple[int, int]] = []
    hotspots: dict[int, int] = {}
    header_seen = False
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text:
            continue
        if not header_seen:
            if text.replace(" ", "") != "seq,pc":
                raise MalformedRow(f'line {lineno}: expected header "seq,pc", got {text!r}')
            header_seen = True
            continue
        parts = text.split(",")
        if len(parts) != 2:
            raise MalformedRow(f"line {lineno}: expected 2 columns, got {len(parts)}")
        try:
            seq = int(parts[0].strip())
            pc = _parse_pc_value(parts[1])
        except ValueError as exc:
            raise MalformedRow(f"line {lineno}: {text!r}") from exc
        samples.append((seq, pc))
        hotspots[pc] = hotspots.get(pc, 0) + 1
    return PcTrace(samples=tuple(samples), hotspots=hotspots)


# ---------------------------------------------------------------------------
# pcap

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_SWAPPED = 0xD4C3B2A1
PCAPNG_MAGIC_BYTES = b"\x0a\x0d\x0d\x0a"
LINKTYPE_ETHERNET = 1

ETHERTYPE_IPV4 = 0x0800
PROTO_TCP = 6
PROTO_UDP = 17

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_ACK = 0x10

_DNS_MAX_POINTER_JUMPS = 128


@dataclass(frozen=True)
class PcapMeta:
    version: tuple[int, int]
    snaplen: int
    linktype: int
    byte_swapped: bool


@dataclass(frozen=True)
class Ethernet:
    dst: str
    src: str
    ethertype: int


@dataclass(frozen=True)
class Ipv4:
    src: str
    dst: str
    proto: int
    total_length: int
    ihl: int
    frag_offset: int
    more_frags: bool


@dataclass(frozen=True)
class Tcp:
    sport: int
    dport: int
    seq: int
    flags: int
    payload_len: int
    payload: bytes


@dataclass(frozen=True)
class Udp:
    sport: int
    dport: int
    payload_len: int
    payload: bytes


@dataclass(frozen=True)
class DnsInfo:
    txid: int
    is_response: bool
    qname: str | None
    qtype: int | None


@dataclass(frozen=True)
class PacketRecord:
    ts_sec: int
    ts_usec: int
    caplen: int
    origlen: int
    eth: Ethernet | None
    ip: Ipv4 | None
    l4: Tcp | Udp | None
    dns: DnsInfo | None

    @property
    def ts(self) -> float:
        return self.ts_sec + self.ts_usec / 1_000_000.0


@dataclass(frozen=True)
class PcapCapture:
    meta: PcapMeta
    records: tuple[PacketRecord, ...]
    truncated_records: int


def _mac(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


def _dns_name(buf: bytes, off: int) -> tuple[str, int] | None:
    """Decode a possibly-compressed DNS name; None on any malformation.

    Pointer chains bail out after 128 jumps so crafted loops terminate.
    """
    labels: list[str] = []
    pos = off
    jumps = 0
    end_after: int | None = None
    while True:
        if pos >= len(buf):
            return None
        length = buf[pos]
        if length == 0:
            pos += 1
            break
        if length & 0xC0 == 0xC0:
            if pos + 1 >= len(buf):
                return None
            jumps += 1
            if jumps > _DNS_MAX_POINTER_JUMPS:
                return None
            if end_after is None:
                end_after = pos + 2
            pos = ((length & 0x3F) << 8) | buf[pos + 1]
            continue
        if length & 0xC0:
            return None
        if pos + 1 + length > len(buf):
            return None
        labels.append(buf[pos + 1 : pos + 1 + length].decode("ascii", errors="replace"))
        pos += 1 + length
        if len(labels) > 127:
            return None
    return ".".join(labels), (end_after if end_after is not None else pos)


def _decode_dns(payload: bytes) -> DnsInfo | None:
    if len(payload) < 12:
        return None
    txid, flags, qdcount = struct.unpack_from("!HHH", payload, 0)
    is_response = bool(flags & 0x8000)
    qname = None
    qtype = None
    if qdcount >= 1:
        parsed = _dns_name(payload, 12)
        if parsed is not None:
            qname, after = parsed
            if after + 2 <= len(payload):
                qtype = struct.unpack_from("!H", payload, after)[0]
    return DnsInfo(txid=txid, is_response=is_response, qname=qname, qtype=qtype)


def _decode_packet(ts_sec: int, ts_usec: int, caplen: int, origlen: int,
                   buf: bytes) -> PacketRecord:
    eth = ip = l4 = dns = None
    if len(buf) >= 14:
        ethertype = struct.unpack_from("!H", buf, 12)[0]
        eth = Ethernet(dst=_mac(buf[0:6]), src=_mac(buf[6:12]), ethertype=ethertype)
        if ethertype == ETHERTYPE_IPV4 and len(buf) >= 34:
            ver_ihl = buf[14]
            ihl = (ver_ihl & 0xF) * 4
            if ver_ihl >> 4 == 4 and ihl >= 20 and 14 + ihl <= len(buf):
                total_length = struct.unpack_from("!H", buf, 16)[0]
                frag_field = struct.unpack_from("!H", buf, 20)[0]
                proto = buf[23]
                src = ".".join(str(b) for b in buf[26:30])
                dst = ".".join(str(b) for b in buf[30:34])
                frag_offset = (frag_field & 0x1FFF) * 8
                ip = Ipv4(src=src, dst=dst, proto=proto, total_length=total_length,
                          ihl=ihl, frag_offset=frag_offset,
                          more_frags=bool(frag_field & 0x2000))
                l4_off = 14 + ihl
                if frag_offset == 0 and proto == PROTO_TCP and l4_off + 20 <= len(buf):
                    sport, dport, seq = struct.unpack_from("!HHI", buf, l4_off)
                    doff = (buf[l4_off + 12] >> 4) * 4
                    flags8 = buf[l4_off + 13]
                    payload_len = max(0, total_length - ihl - doff)
                    payload = buf[l4_off + doff : l4_off + doff + payload_len]
                    l4 = Tcp(sport=sport, dport=dport, seq=seq, flags=flags8,
                             payload_len=payload_len, payload=payload)
                elif frag_offset == 0 and proto == PROTO_UDP and l4_off + 8 <= len(buf):
                    sport, dport, ulen = struct.unpack_from("!HHH", buf, l4_off)
                    payload_len = max(0, ulen - 8)
                    payload = buf[l4_off + 8 : l4_off + 8 + payload_len]
                    l4 = Udp(sport=sport, dport=dport, payload_len=payload_len,
                             payload=payload)
                    if sport == 53 or dport == 53:
                        dns = _decode_dns(payload)
    return PacketRecord(ts_sec=ts_sec, ts_usec=ts_usec, caplen=caplen,
                        origlen=origlen, eth=eth, ip=ip, l4=l4, dns=dns)


def parse_pcap_detailed(data: bytes) -> PcapCapture:
    """Classic pcap (microsecond magic, either byte order, Ethernet only)."""
    if data[:4] == PCAPNG_MAGIC_BYTES:
        raise NotPcap("pcapng input detected; only classic pcap is supported")
    if len(data) < 24:
        raise NotPcap("file shorter than the pcap global header")
    magic = struct.unpack_from("<I", data, 0)[0]
    if magic == PCAP_MAGIC:
        end = "<"
        swapped = False
    elif magic == PCAP_MAGIC_SWAPPED:
        end = ">"
        swapped = True
    else:
        raise NotPcap(f"unknown capture magic 0x{magic:08x}")
    vmajor, vminor, _thiszone, _sigfigs, snaplen, linktype = struct.unpack_from(
        end + "HHiIII", data, 4)
    if linktype != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"linktype {linktype} is not Ethernet")
    meta = PcapMeta(version=(vmajor, vminor), snaplen=snaplen,
                    linktype=linktype, byte_swapped=swapped)
    records: list[PacketRecord] = []
    truncated = 0
    offset = 24
    while offset + 16 <= len(data):
        ts_sec, ts_usec, caplen, origlen = struct.unpack_from(end + "IIII", data, offset)
        if caplen > snaplen or caplen > origlen:
            truncated += 1
            break
        if offset + 16 + caplen > len(data):
            truncated += 1
            break
        buf = data[offset + 16 : offset + 16 + caplen]
        records.append(_decode_packet(ts_sec, ts_usec, caplen, origlen, buf))
        offset += 16 + caplen
    if 0 < len(data) - offset < 16:
        truncated += 1
    return PcapCapture(meta=meta, records=tuple(records), truncated_records=truncated)


def parse_pcap(data: bytes) -> list[PacketRecord]:
    return list(parse_pcap_detailed(data).records)


# ---------------------------------------------------------------------------
# flows

@dataclass
class Flow:
    initiator: tuple[str, int]
    responder: tuple[str, int]
    proto: int
    packets: int
    bytes: int
    bytes_out: int
    first_ts: float
    last_ts: float
    syn_only: bool

    @property
    def key(self) -> tuple[tuple[str, int], tuple[str, int], int]:
        a, b = sorted((self.initiator, self.responder),
                      key=lambda e: (_ip_sort_key(e[0]), e[1]))
        return (a, b, self.proto)

    @property
    def duration(self) -> float:
        return self.last_ts - self.first_ts


def _ip_sort_key(ip: str) -> tuple[int, ...]:
    return tuple(int(p) for p in ip.split("."))


def reconstruct_flows(packets) -> list[Flow]:
    """Group parsed TCP/UDP packets into canonical bidirectional flows.

    The canonical key orders endpoints numerically; the initiator is whoever
    sent the first observed packet. syn_only marks TCP flows where every
    segment is a bare SYN (no ACK, no payload).
    """
    flows: dict[tuple, Flow] = {}
    for pkt in packets:
        if pkt.ip is None or pkt.l4 is None:
            continue
        src = (pkt.ip.src, pkt.l4.sport)
        dst = (pkt.ip.dst, pkt.l4.dport)
        lo, hi = sorted((src, dst), key=lambda e: (_ip_sort_key(e[0]), e[1]))
        key = (lo, hi, pkt.ip.proto)
        is_tcp = isinstance(pkt.l4, Tcp)
        pure_syn = bool(is_tcp and (pkt.l4.flags & TCP_SYN) and
                        not (pkt.l4.flags & TCP_ACK) and pkt.l4.payload_len == 0)
        flow = flows.get(key)
        if flow is None:
            flows[key] = Flow(initiator=src, responder=dst, proto=pkt.ip.proto,
                              packets=1, bytes=pkt.l4.payload_len,
                              bytes_out=pkt.l4.payload_len, first_ts=pkt.ts,
                              last_ts=pkt.ts, syn_only=is_tcp and pure_syn)
            continue
        flow.packets += 1
        flow.bytes += pkt.l4.payload_len
        if src == flow.initiator:
            flow.bytes_out += pkt.l4.payload_len
        flow.first_ts = min(flow.first_ts, pkt.ts)
        flow.last_ts = max(flow.last_ts, pkt.ts)
        flow.syn_only = flow.syn_only and pure_syn
    return list(flows.values())


@dataclass(frozen=True)
class DnsQuery:
    name: str
    resolver: str
    port: int


def extract_dns_queries(packets) -> list[DnsQuery]:
    """Unique (name, resolver, port) query triples in first-seen order."""
    seen: set[tuple[str, str, int]] = set()
    out: list[DnsQuery] = []
    for pkt in packets:
        if pkt.dns is None or pkt.dns.is_response or not pkt.dns.qname:
            continue
        if pkt.ip is None or not isinstance(pkt.l4, Udp):
            continue
        triple = (pkt.dns.qname, pkt.ip.dst, pkt.l4.dport)
        if triple in seen:
            continue
        seen.add(triple)
        out.append(DnsQuery(name=triple[0], resolver=triple[1], port=triple[2]))
    return out


# ---------------------------------------------------------------------------
# behaviors

_PRIVATE_NETS = (
    ipaddress.ip_network("10.0.0.0/8"),
    ipaddress.ip_network("172.16.0.0/12"),
    ipaddress.ip_network("192.168.0.0/16"),
    ipaddress.ip_network("127.0.0.0/8"),
    ipaddress.ip_network("169.254.0.0/16"),
)


def is_private(ip: str) -> bool:
    """RFC1918, loopback, and link-local; everything else is external."""
    try:
        addr = ipaddress.IPv4Address(ip)
    except ValueError:
        return False
    return any(addr in net for net in _PRIVATE_NETS)


SYSTEM_DIR_PREFIXES = ("/usr/", "/bin/", "/sbin/", "/lib/", "/etc/")

_RENAME_NAMES = frozenset({"rename", "renameat", "renameat2"})
_FILE_OPEN_NAMES = frozenset({"open", "openat", "openat2", "fopen", "read", "stat"})

_CREDENTIAL_PREFIXES = ("/etc/passwd", "/etc/shadow", "/etc/master.passwd")
_CREDENTIAL_SUBSTRINGS = (".ssh", "credential", "wallet")


@dataclass(frozen=True)
class ScanConfig:
    duration_threshold: float = 2.0
    unique_threshold: int = 100


@dataclass(frozen=True)
class MasqueradeRename:
    old: str
    new: str
    event_seq: int


@dataclass(frozen=True)
class CredentialAccess:
    path: str
    event_seq: int


@dataclass(frozen=True)
class ScanFinding:
    port: int
    unique_addrs: int
    flow_count: int
    mean_duration: float


@dataclass(frozen=True)
class ExfilCandidate:
    channel: str  # dns | tcp | other
    destination: str
    evidence: tuple[str, ...]


@dataclass(frozen=True)
class BehaviorSummary:
    masquerade_renames: tuple[MasqueradeRename, ...] = ()
    dns_queries: tuple[DnsQuery, ...] = ()
    scan_findings: tuple[ScanFinding, ...] = ()
    outbound_tcp: tuple[tuple[str, int, int], ...] = ()
    exfil_candidates: tuple[ExfilCandidate, ...] = ()
    credential_accesses: tuple[CredentialAccess, ...] = ()


def _rename_paths(args: dict[str, str]) -> tuple[str | None, str | None]:
    old = new = None
    for key, value in args.items():
        if "old" in key.lower():
            old = value
        elif "new" in key.lower():
            new = value
    if old is None or new is None:
        path_values = [v for v in args.values() if v.startswith("/")]
        if len(path_values) >= 2:
            old, new = path_values[0], path_values[1]
    return old, new


def _is_credential_path(path: str) -> bool:
    if any(path.startswith(p) for p in _CREDENTIAL_PREFIXES):
        return True
    return any(s in path for s in _CREDENTIAL_SUBSTRINGS)


def detect_behaviors(trace: ExecTrace | None, flows: list[Flow],
                     dns: list[DnsQuery], config: ScanConfig | None = None) -> BehaviorSummary:
    """Extract the breach-relevant indicators from a trace plus network data."""
    config = config or ScanConfig()

    masquerades: list[MasqueradeRename] = []
    credentials: list[CredentialAccess] = []
    seen_cred_paths: set[str] = set()
    events = trace.events if trace is not None else ()
    for ev in events:
        if ev.name in _RENAME_NAMES:
            old, new = _rename_paths(ev.args)
            if old and new and old != new and new.startswith(SYSTEM_DIR_PREFIXES):
                masquerades.append(MasqueradeRename(old=old, new=new, event_seq=ev.seq))
        elif ev.name in _FILE_OPEN_NAMES:
            for value in ev.args.values():
                if value.startswith("/") and _is_credential_path(value):
                    if value not in seen_cred_paths:
                        seen_cred_paths.add(value)
                        credentials.append(CredentialAccess(path=value, event_seq=ev.seq))

    external_queries = tuple(q for q in dns if not is_private(q.resolver))

    per_port: dict[int, list[Flow]] = {}
    for flow in flows:
        if is_private(flow.responder[0]):
            continue
        if flow.syn_only or flow.duration < config.duration_threshold:
            per_port.setdefault(flow.responder[1], []).append(flow)
    findings: list[ScanFinding] = []
    for port in sorted(per_port):
        candidates = per_port[port]
        unique = {f.responder[0] for f in candidates}
        if len(unique) >= config.unique_threshold:
            mean_dur = sum(f.duration for f in candidates) / len(candidates)
            findings.append(ScanFinding(port=port, unique_addrs=len(unique),
                                        flow_count=len(candidates),
                                        mean_duration=mean_dur))

    outbound: list[tuple[str, int, int]] = []
    for flow in flows:
        if (flow.proto == PROTO_TCP and not flow.syn_only and flow.bytes_out > 0
                and not is_private(flow.responder[0])):
            outbound.append((flow.responder[0], flow.responder[1], flow.bytes_out))
    outbound.sort(key=lambda t: (_ip_sort_key(t[0]), t[1]))

    candidates: list[ExfilCandidate] = []
    by_resolver: dict[tuple[str, int], list[str]] = {}
    for q in external_queries:
        by_resolver.setdefault((q.resolver, q.port), []).append(q.name)
    for (resolver, port) in sorted(by_resolver, key=lambda rp: (_ip_sort_key(rp[0]), rp[1])):
        names = by_resolver[(resolver, port)]
        evidence = tuple(f"dns query {n} -> {resolver}:{port}" for n in names)
        candidates.append(ExfilCandidate(channel="dns",
                                         destination=f"{resolver}:{port}",
                                         evidence=evidence))
    for ip, port, nbytes in outbound:
        candidates.append(ExfilCandidate(
            channel="tcp", destination=f"{ip}:{port}",
            evidence=(f"tcp flow to {ip}:{port} with {nbytes} payload bytes out",)))
    seen_other: set[tuple[str, int]] = set()
    for flow in flows:
        if (flow.proto == PROTO_UDP and flow.responder[1] != 53 and flow.bytes_out > 0
                and not is_private(flow.responder[0])):
            ep = flow.responder
            if ep not in seen_other:
                seen_other.add(ep)
                candidates.append(ExfilCandidate(
                    channel="other", destination=f"{ep[0]}:{ep[1]}",
                    evidence=(f"udp flow to {ep[0]}:{ep[1]} with "
                              f"{flow.bytes_out} payload bytes out",)))

    return BehaviorSummary(
        masquerade_renames=tuple(masquerades),
        dns_queries=external_queries,
        scan_findings=tuple(findings),
        outbound_tcp=tuple(outbound),
        exfil_candidates=tuple(candidates),
        credential_accesses=tuple(credentials),
    )
