"""Deterministic builders for synthetic fixtures.

Everything here produces bytes from first principles so tests and demo
scripts can assert exact counts: hand-encoded ARM instruction words, minimal
ELF images (both bitnesses, both byte orders, with or without section
headers), classic pcap captures built frame by frame, and emulation-log text.
No randomness unless a generator is passed in explicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import Dataset
from .features import DIM
from .graphs import CallGraph, FunctionFeatures, Icfg, IcfgNodeRec

# ---------------------------------------------------------------------------
# instruction words (returned as ints; see assemble())

A64_RET = 0xD65F03C0
A64_NOP = 0xD503201F
A64_PROLOGUE = 0xA9BF7BFD  # stp x29, x30, [sp, #-16]!

A32_BX_LR = 0xE12FFF1E
A32_MOV_PC_LR = 0xE1A0F00E
A32_STR_LR_PUSH = 0xE52DE004  # str lr, [sp, #-4]!
A32_LDR_PC_POP = 0xE49DF004  # ldr pc, [sp], #4


def a64_bl(src: int, dst: int) -> int:
    return 0x94000000 | (((dst - src) >> 2) & 0x3FFFFFF)


def a64_b(src: int, dst: int) -> int:
    return 0x14000000 | (((dst - src) >> 2) & 0x3FFFFFF)


def a64_bcond(src: int, dst: int, cond: int = 0) -> int:
    return 0x54000000 | ((((dst - src) >> 2) & 0x7FFFF) << 5) | (cond & 0xF)


def a64_cbz(src: int, dst: int, rt: int = 0) -> int:
    return 0x34000000 | ((((dst - src) >> 2) & 0x7FFFF) << 5) | rt


def a64_cbnz(src: int, dst: int, rt: int = 0) -> int:
    return 0x35000000 | ((((dst - src) >> 2) & 0x7FFFF) << 5) | rt


def a64_tbz(src: int, dst: int, rt: int = 0, bit: int = 0) -> int:
    return 0x36000000 | ((bit & 0x1F) << 19) | ((((dst - src) >> 2) & 0x3FFF) << 5) | rt


def a64_blr(rn: int = 8) -> int:
    return 0xD63F0000 | (rn << 5)


def a64_br(rn: int = 8) -> int:
    return 0xD61F0000 | (rn << 5)


def a64_svc(imm: int = 0) -> int:
    return 0xD4000001 | ((imm & 0xFFFF) << 5)


def a64_movz(rd: int = 0, imm: int = 0) -> int:
    return 0xD2800000 | ((imm & 0xFFFF) << 5) | (rd & 0x1F)


def _a32_imm24(src: int, dst: int) -> int:
    return ((dst - src - 8) >> 2) & 0xFFFFFF


def a32_bl(src: int, dst: int, cond: int = 0xE) -> int:
    return (cond << 28) | 0x0B000000 | _a32_imm24(src, dst)


def a32_b(src: int, dst: int, cond: int = 0xE) -> int:
    return (cond << 28) | 0x0A000000 | _a32_imm24(src, dst)


def a32_blx_imm(src: int, dst: int, h: int = 0) -> int:
    return 0xFA000000 | (h << 24) | _a32_imm24(src, dst)


def a32_blx_reg(rm: int = 3) -> int:
    return 0xE12FFF30 | (rm & 0xF)


def a32_bx(rm: int) -> int:
    return 0xE12FFF10 | (rm & 0xF)


def a32_push(mask: int) -> int:
    return 0xE92D0000 | (mask & 0xFFFF)


def a32_pop(mask: int) -> int:
    return 0xE8BD0000 | (mask & 0xFFFF)


def a32_svc(imm: int = 0) -> int:
    return 0xEF000000 | (imm & 0xFFFFFF)


def a32_mov_imm(rd: int = 0, imm: int = 0) -> int:
    return 0xE3A00000 | ((rd & 0xF) << 12) | (imm & 0xFF)


A32_PROLOGUE = a32_push(0x4010)  # push {r4, lr}
A32_RET_POP = a32_pop(0x8010)  # pop {r4, pc}


def assemble(words, endian: str = "<") -> bytes:
    return b"".join(struct.pack(endian + "I", w & 0xFFFFFFFF) for w in words)


# ---------------------------------------------------------------------------
# tiny two-pass program assembler

_A64_OPS = {"bl": a64_bl, "b": a64_b, "cbz": a64_cbz, "bcond": a64_bcond}
_A32_OPS = {"bl": a32_bl, "b": a32_b}


def build_program(funcs, base: int = 0x400000, mode: str = "a64",
                  endian: str = "<"):
    """Lay out functions contiguously and resolve symbolic branch targets.

    funcs: list of (name, words) where a word is an int or a tuple:
      ("bl", name) / ("b", name)          target = entry of that function
      ("cbz", +k) / ("bcond", +k)         target = this address + 4*k (a64)
      ("b+", +k)                          relative branch, either mode
    Returns (code bytes, symbols, entry addresses by name).
    """
    ops = _A64_OPS if mode == "a64" else _A32_OPS
    addrs: dict[str, int] = {}
    cursor = base
    for name, words in funcs:
        addrs[name] = cursor
        cursor += 4 * len(words)
    out = bytearray()
    for name, words in funcs:
        pc = addrs[name]
        for j, w in enumerate(words):
            here = pc + 4 * j
            if isinstance(w, tuple):
                op, tgt = w
                if op == "b+":
                    w = (a64_b if mode == "a64" else a32_b)(here, here + 4 * tgt)
                elif isinstance(tgt, int):
                    w = _A64_OPS[op](here, here + 4 * tgt)
                else:
                    w = ops[op](here, addrs[tgt])
            out += struct.pack(endian + "I", w & 0xFFFFFFFF)
    symbols = [(name, addrs[name], 4 * len(words), True) for name, words in funcs]
    return bytes(out), symbols, addrs


# ---------------------------------------------------------------------------
# ELF builder

SHT_PROGBITS = 1
SHT_SYMTAB = 2
SHT_STRTAB = 3
SHT_DYNAMIC = 6
SHT_NOBITS = 8
SHT_DYNSYM = 11

SHF_ALLOC = 0x2
SHF_EXECINSTR = 0x4

PT_LOAD = 1
PT_DYNAMIC = 2
PT_INTERP = 3
PF_X, PF_W, PF_R = 1, 2, 4

DT_NULL, DT_NEEDED, DT_STRTAB = 0, 1, 5
SHN_ABS = 0xFFF1

STB_GLOBAL = 1
STT_OBJECT, STT_FUNC = 1, 2


@dataclass
class SynthSection:
    name: str
    vaddr: int
    data: bytes
    executable: bool = False
    nobits: bool = False


@dataclass
class _Blob:
    name: str
    data: bytes
    vaddr: int | None
    sh_type: int
    flags: int
    link_name: str | None = None
    entsize: int = 0
    nobits: bool = False
    offset: int = 0


def _align(n: int, a: int) -> int:
    return (n + a - 1) & ~(a - 1)


def build_elf(*, bits: int = 64, endian: str = "<", sections=(),
              symbols=(), imports=(), needed=(), interp: str | None = None,
              entry: int | None = None, include_shdrs: bool = True,
              elf_type: int = 2, machine: int | None = None) -> bytes:
    """Emit a minimal valid ARM ELF image.

    sections: SynthSection list. symbols: (name, value, size, is_func) rows,
    defined against the containing section. imports: undefined dynamic symbol
    names. needed: DT_NEEDED library names. include_shdrs=False produces a
    section-less image (program headers only).
    """
    is64 = bits == 64
    end = endian
    ehsize = 64 if is64 else 52
    phent = 56 if is64 else 32
    shent = 64 if is64 else 40
    if machine is None:
        machine = 0xB7 if is64 else 0x28

    blobs: list[_Blob] = []
    for s in sections:
        flags = SHF_ALLOC | (SHF_EXECINSTR if s.executable else 0)
        blobs.append(_Blob(name=s.name, data=b"" if s.nobits else s.data,
                           vaddr=s.vaddr, sh_type=SHT_NOBITS if s.nobits else SHT_PROGBITS,
                           flags=flags, nobits=s.nobits))

    auto_vaddr = 0x100000
    for s in sections:
        auto_vaddr = max(auto_vaddr, _align(s.vaddr + len(s.data) + 1, 0x1000))

    def take_vaddr(size: int) -> int:
        nonlocal auto_vaddr
        v = auto_vaddr
        auto_vaddr = _align(v + size + 1, 16)
        return v

    if interp is not None:
        data = interp.encode() + b"\x00"
        blobs.append(_Blob(name=".interp", data=data, vaddr=take_vaddr(len(data)),
                           sh_type=SHT_PROGBITS, flags=SHF_ALLOC))

    dynstr_off: dict[str, int] = {}
    if needed or imports:
        buf = bytearray(b"\x00")
        for name in list(needed) + list(imports):
            if name not in dynstr_off:
                dynstr_off[name] = len(buf)
                buf += name.encode() + b"\x00"
        dynstr = bytes(buf)
        blobs.append(_Blob(name=".dynstr", data=dynstr, vaddr=take_vaddr(len(dynstr)),
                           sh_type=SHT_STRTAB, flags=SHF_ALLOC))
        sym_ent = 24 if is64 else 16
        if imports:
            rows = bytearray(bytes(sym_ent))  # null symbol
            for name in imports:
                info = (STB_GLOBAL << 4) | STT_FUNC
                if is64:
                    rows += struct.pack(end + "IBBHQQ", dynstr_off[name], info, 0, 0, 0, 0)
                else:
                    rows += struct.pack(end + "IIIBBH", dynstr_off[name], 0, 0, info, 0, 0)
            blobs.append(_Blob(name=".dynsym", data=bytes(rows),
                               vaddr=take_vaddr(len(rows)), sh_type=SHT_DYNSYM,
                               flags=SHF_ALLOC, link_name=".dynstr", entsize=sym_ent))
        dyn_fmt = end + ("qQ" if is64 else "iI")
        dynstr_vaddr = next(b.vaddr for b in blobs if b.name == ".dynstr")
        ents = bytearray()
        for name in needed:
            ents += struct.pack(dyn_fmt, DT_NEEDED, dynstr_off[name])
        ents += struct.pack(dyn_fmt, DT_STRTAB, dynstr_vaddr)
        ents += struct.pack(dyn_fmt, DT_NULL, 0)
        blobs.append(_Blob(name=".dynamic", data=bytes(ents),
                           vaddr=take_vaddr(len(ents)), sh_type=SHT_DYNAMIC,
                           flags=SHF_ALLOC, link_name=".dynstr",
                           entsize=16 if is64 else 8))

    if symbols and include_shdrs:
        sbuf = bytearray(b"\x00")
        str_offs = {}
        for name, _v, _sz, _f in symbols:
            if name not in str_offs:
                str_offs[name] = len(sbuf)
                sbuf += name.encode() + b"\x00"

        def shndx_for(value: int) -> int:
            for i, s in enumerate(sections):
                span = len(s.data)
                if s.vaddr <= value < s.vaddr + max(span, 1):
                    return 1 + i  # shdr index: null header first
            return SHN_ABS

        sym_ent = 24 if is64 else 16
        rows = bytearray(bytes(sym_ent))
        for name, value, size, is_func in symbols:
            info = (STB_GLOBAL << 4) | (STT_FUNC if is_func else STT_OBJECT)
            shndx = shndx_for(value)
            if is64:
                rows += struct.pack(end + "IBBHQQ", str_offs[name], info, 0,
                                    shndx, value, size)
            else:
                rows += struct.pack(end + "IIIBBH", str_offs[name], value, size,
                                    info, 0, shndx)
        blobs.append(_Blob(name=".symtab", data=bytes(rows), vaddr=None,
                           sh_type=SHT_SYMTAB, flags=0, link_name=".strtab",
                           entsize=sym_ent))
        blobs.append(_Blob(name=".strtab", data=bytes(sbuf), vaddr=None,
                           sh_type=SHT_STRTAB, flags=0))

    shstr_index = 0
    if include_shdrs:
        nbuf = bytearray(b"\x00")
        name_offs = {}
        for b in blobs + [_Blob(".shstrtab", b"", None, SHT_STRTAB, 0)]:
            name_offs[b.name] = len(nbuf)
            nbuf += b.name.encode() + b"\x00"
        blobs.append(_Blob(name=".shstrtab", data=bytes(nbuf), vaddr=None,
                           sh_type=SHT_STRTAB, flags=0))
        shstr_index = len(blobs)  # +1 for leading null header

    # program headers: one PT_LOAD per mapped blob, then PT_INTERP/PT_DYNAMIC
    load_blobs = [b for b in blobs if b.vaddr is not None]
    phnum = len(load_blobs) + (1 if interp is not None else 0) + (
        1 if any(b.name == ".dynamic" for b in blobs) else 0)

    off = ehsize + phnum * phent
    for b in blobs:
        off = _align(off, 8)
        b.offset = off
        off += len(b.data)
    shoff = _align(off, 8) if include_shdrs else 0
    shnum = 1 + len(blobs) if include_shdrs else 0

    exec_sections = [s for s in sections if s.executable]
    if entry is None:
        entry = exec_sections[0].vaddr if exec_sections else 0

    ident = b"\x7fELF" + bytes([2 if is64 else 1, 1 if end == "<" else 2, 1]) + bytes(9)
    if is64:
        ehdr = ident + struct.pack(end + "HHIQQQIHHHHHH", elf_type, machine, 1,
                                   entry, ehsize, shoff, 0, ehsize, phent, phnum,
                                   shent, shnum, shstr_index)
    else:
        ehdr = ident + struct.pack(end + "HHIIIIIHHHHHH", elf_type, machine, 1,
                                   entry, ehsize, shoff, 0, ehsize, phent, phnum,
                                   shent, shnum, shstr_index)

    phdrs = bytearray()

    def phdr(p_type, flags, offset, vaddr, filesz, memsz):
        if is64:
            phdrs.extend(struct.pack(end + "IIQQQQQQ", p_type, flags, offset,
                                     vaddr, vaddr, filesz, memsz, 8))
        else:
            phdrs.extend(struct.pack(end + "IIIIIIII", p_type, offset, vaddr,
                                     vaddr, filesz, memsz, flags, 8))

    for b in load_blobs:
        flags = PF_R | (PF_X if b.flags & SHF_EXECINSTR else PF_W)
        memsz = len(b.data) if not b.nobits else max(len(b.data), 16)
        phdr(PT_LOAD, flags, b.offset, b.vaddr, 0 if b.nobits else len(b.data), memsz)
    if interp is not None:
        ib = next(b for b in blobs if b.name == ".interp")
        phdr(PT_INTERP, PF_R, ib.offset, ib.vaddr, len(ib.data), len(ib.data))
    for b in blobs:
        if b.name == ".dynamic":
            phdr(PT_DYNAMIC, PF_R, b.offset, b.vaddr, len(b.data), len(b.data))

    body = bytearray(ehdr) + phdrs
    for b in blobs:
        body += bytes(b.offset - len(body))
        body += b.data

    if include_shdrs:
        body += bytes(shoff - len(body))
        link_index = {b.name: 1 + i for i, b in enumerate(blobs)}

        def shdr(name_off, sh_type, flags, addr, offset, size, link, entsize):
            if is64:
                return struct.pack(end + "IIQQQQIIQQ", name_off, sh_type, flags,
                                   addr, offset, size, link, 0, 8, entsize)
            return struct.pack(end + "10I", name_off, sh_type, flags, addr,
                               offset, size, link, 0, 8, entsize)

        body += shdr(0, 0, 0, 0, 0, 0, 0, 0)
        nb = next(b for b in blobs if b.name == ".shstrtab")
        name_offs = {}
        cursor = 1
        scan = nb.data
        while cursor < len(scan):
            end_i = scan.index(b"\x00", cursor)
            name_offs[scan[cursor:end_i].decode()] = cursor
            cursor = end_i + 1
        for b in blobs:
            size = len(b.data)
            if b.nobits:
                size = 16
            body += shdr(name_offs.get(b.name, 0), b.sh_type, b.flags,
                         b.vaddr or 0, b.offset, size,
                         link_index.get(b.link_name, 0), b.entsize)

    return bytes(body)


def make_text_elf(code: bytes, symbols=(), *, bits: int = 64, endian: str = "<",
                  base: int = 0x400000, entry: int | None = None,
                  imports=(), needed=(), interp=None,
                  include_shdrs: bool = True) -> bytes:
    """One executable .text section holding code, plus the usual tables."""
    text = SynthSection(name=".text", vaddr=base, data=code, executable=True)
    return build_elf(bits=bits, endian=endian, sections=[text], symbols=symbols,
                     imports=imports, needed=needed, interp=interp,
                     entry=entry, include_shdrs=include_shdrs)


def make_sample_binary(label: str, index: int, *, bits: int = 64,
                       endian: str = "<") -> bytes:
    """A small program whose structure depends on the label.

    Exfiltrator-shaped samples carry supervisor calls, indirect calls, and a
    wider call fan-out; benign samples are plain call chains. index varies
    the shape within a class so feature vectors differ sample to sample.
    """
    exfil = label == "exfiltrator"
    k = 2 + index % 3
    base = 0x400000
    if bits == 64:
        pro, ret, mov, svc = A64_PROLOGUE, A64_RET, a64_movz, a64_svc
        indirect = a64_blr(8)
        mode = "a64"
    else:
        pro, ret, mov, svc = A32_PROLOGUE, A32_RET_POP, a32_mov_imm, a32_svc
        indirect = a32_blx_reg(3)
        mode = "a32"

    funcs = []
    for i in range(k):
        funcs.append((f"leaf{i}", [pro, mov(0, (7 * index + i) % 200), ret]))
    worker = [pro] + [("bl", f"leaf{i}") for i in range(k)]
    if exfil:
        worker += [svc(0), indirect, svc(0)]
    worker += [mov(1, index % 100), ret]
    funcs.append(("worker", worker))
    start = [pro, ("bl", "worker")]
    if exfil:
        start += [svc(0)]
    start += [mov(0, 1), ret]
    funcs.append(("start", start))
    if exfil:
        # unreferenced routine, reachable only through the prologue scan
        funcs.append(("__orphan", [pro, mov(2, 9), svc(0), ret]))

    code, symbols, addrs = build_program(funcs, base=base, mode=mode, endian=endian)
    named = [s for s in symbols if not s[0].startswith(("leaf", "__orphan"))]
    if exfil:
        imports = ("socket", "connect", "sendto", "recvfrom")
    else:
        imports = ("printf", "fopen")
    return make_text_elf(code, named, bits=bits, endian=endian, base=base,
                         entry=addrs["start"], imports=imports,
                         needed=("libc.so.6",))


# ---------------------------------------------------------------------------
# packet builders

def _mac_bytes(mac: str) -> bytes:
    return bytes.fromhex(mac.replace(":", ""))


def _ip_bytes(ip: str) -> bytes:
    return bytes(int(p) for p in ip.split("."))


def build_eth(payload: bytes, src: str = "02:00:00:00:00:01",
              dst: str = "02:00:00:00:00:02", ethertype: int = 0x0800) -> bytes:
    return _mac_bytes(dst) + _mac_bytes(src) + struct.pack("!H", ethertype) + payload


def build_ipv4(src: str, dst: str, proto: int, payload: bytes, *,
               ident: int = 0, ttl: int = 64, options: bytes = b"",
               frag_offset: int = 0, more_frags: bool = False) -> bytes:
    assert len(options) % 4 == 0
    ihl = 20 + len(options)
    total = ihl + len(payload)
    flags_frag = (0x2000 if more_frags else 0) | (frag_offset // 8)
    header = struct.pack("!BBHHHBBH", 0x40 | (ihl // 4), 0, total, ident,
                         flags_frag, ttl, proto, 0)
    return header + _ip_bytes(src) + _ip_bytes(dst) + options + payload


def build_tcp(sport: int, dport: int, *, seq: int = 0, ack: int = 0,
              flags: int = 0x02, payload: bytes = b"", options: bytes = b"") -> bytes:
    assert len(options) % 4 == 0
    doff = (20 + len(options)) // 4
    header = struct.pack("!HHIIBBHHH", sport, dport, seq, ack, doff << 4,
                         flags, 8192, 0, 0)
    return header + options + payload


def build_udp(sport: int, dport: int, payload: bytes = b"") -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload


def encode_dns_name(name: str) -> bytes:
    out = b""
    for label in name.split("."):
        raw = label.encode()
        out += bytes([len(raw)]) + raw
    return out + b"\x00"


def build_dns_query(txid: int, name: str, qtype: int = 1) -> bytes:
    header = struct.pack("!HHHHHH", txid, 0x0100, 1, 0, 0, 0)
    return header + encode_dns_name(name) + struct.pack("!HH", qtype, 1)


def build_dns_response(txid: int, name: str, answer_ip: str, qtype: int = 1) -> bytes:
    header = struct.pack("!HHHHHH", txid, 0x8180, 1, 1, 0, 0)
    question = encode_dns_name(name) + struct.pack("!HH", qtype, 1)
    # answer name is a compression pointer back to the question name
    answer = struct.pack("!HHHIH", 0xC00C, 1, 1, 60, 4) + _ip_bytes(answer_ip)
    return header + question + answer


def build_pcap(frames, *, swapped: bool = False, snaplen: int = 65535) -> bytes:
    """frames: iterable of (ts_sec, ts_usec, frame bytes)."""
    end = ">" if swapped else "<"
    out = bytearray(struct.pack(end + "IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0,
                                snaplen, 1))
    for ts_sec, ts_usec, frame in frames:
        out += struct.pack(end + "IIII", ts_sec, ts_usec, len(frame), len(frame))
        out += frame
    return bytes(out)


# ---------------------------------------------------------------------------
# demo scenario: 824 packets, 577 flows, port-23 sweep, DNS + TCP channels

DEMO_INTERNAL = "192.168.1.50"
DEMO_RESOLVER = "198.51.100.53"
DEMO_TCP_SINK = "198.51.100.10"
DEMO_DNS_NAMES = ("telemetry.collect-a.example", "beacon.collect-b.example",
                  "drop.collect-c.example")


def demo_capture(*, swapped: bool = False) -> bytes:
    """Deterministic capture: 120 port-23 SYN probes to unique public hosts,
    3 DNS query/response pairs, 4 outbound TCP data flows, and 450 private
    filler flows. Totals: 824 packets, 577 canonical flows."""
    frames = []
    counter = [0]

    def add(frame: bytes):
        k = counter[0]
        counter[0] += 1
        frames.append((1_700_000_000 + k // 1000, (k % 1000) * 1000, frame))

    for i in range(120):
        probe = build_tcp(40000 + i, 23, seq=1000 + i, flags=0x02)
        add(build_eth(build_ipv4(DEMO_INTERNAL, f"203.0.113.{i + 1}", 6, probe)))

    for i, name in enumerate(DEMO_DNS_NAMES):
        sport = 33000 + i
        q = build_dns_query(0x5100 + i, name)
        add(build_eth(build_ipv4(DEMO_INTERNAL, DEMO_RESOLVER, 17,
                                 build_udp(sport, 53, q))))
        r = build_dns_response(0x5100 + i, name, "203.0.113.200")
        add(build_eth(build_ipv4(DEMO_RESOLVER, DEMO_INTERNAL, 17,
                                 build_udp(53, sport, r))))

    for i in range(4):
        sport, dport = 45000 + i, 9001 + i
        def seg(src, dst, sp, dp, flags, payload=b"", seq=0, ack=0):
            add(build_eth(build_ipv4(src, dst, 6,
                                     build_tcp(sp, dp, seq=seq, ack=ack,
                                               flags=flags, payload=payload))))
        seg(DEMO_INTERNAL, DEMO_TCP_SINK, sport, dport, 0x02, seq=1)
        seg(DEMO_TCP_SINK, DEMO_INTERNAL, dport, sport, 0x12, seq=1, ack=2)
        seg(DEMO_INTERNAL, DEMO_TCP_SINK, sport, dport, 0x10, seq=2, ack=2)
        seg(DEMO_INTERNAL, DEMO_TCP_SINK, sport, dport, 0x18,
            payload=bytes(range(128 - i)) + bytes(i), seq=2, ack=2)
        seg(DEMO_TCP_SINK, DEMO_INTERNAL, dport, sport, 0x18,
            payload=b"ack-data" * 8, seq=2, ack=130)

    for i in range(228):
        req = build_udp(10000 + i, 8000, b"keepalive-packet")
        add(build_eth(build_ipv4("192.168.1.10", "192.168.1.20", 17, req)))
        rsp = build_udp(8000, 10000 + i, b"ok-reply")
        add(build_eth(build_ipv4("192.168.1.20", "192.168.1.10", 17, rsp)))
    for i in range(222):
        one = build_udp(12000 + i, 8001, b"announce")
        add(build_eth(build_ipv4("192.168.1.11", "192.168.1.21", 17, one)))

    assert len(frames) == 824
    return build_pcap(frames, swapped=swapped)


def demo_emulog() -> str:
    return (
        '[1] openat(dirfd=-100, path="/etc/watchdog", flags=0x2) = 3\n'
        '[2] fork() = 1377 | regs{r0=0x0, pc=0x400100}\n'
        '[3] rename(old="/tmp/dvr.arm", new="/usr/dvrHelper") = 0'
        ' | regs{r0=0x0, lr=0x400188}\n'
        '[4] open(path="/etc/shadow", flags=0x0) = 4\n'
        '[5] read(fd=4, len=256) = 198\n'
        '[6] socket(domain=2, type=1, protocol=0) = 5\n'
        '[7] connect(fd=5, addr="198.51.100.10", port=9001) = 0\n'
        '[8] sendto(fd=5, len=128, flags=0) = 128\n'
        '[9] close(fd=5) = 0\n'
    )


def demo_pc_trace() -> str:
    pcs = [0x400000, 0x400004, 0x400008, 0x40000C, 0x400008, 0x40000C,
           0x400008, 0x40000C, 0x400010, 0x400030, 0x400034]
    return "".join(f"0x{pc:x}\n" for pc in pcs)


def demo_flow_csv() -> str:
    pcs = [0x400000, 0x400030, 0x400050, 0x400030, 0x400000]
    rows = "".join(f"{i + 1},0x{pc:x}\n" for i, pc in enumerate(pcs))
    return "seq,pc\n" + rows


DEMO_RUNTIME_OUTPUT = (
    "emulated ARM system boot ok\n"
    "sample mapped at 0x400000, entry 0x40004c\n"
    "9 syscalls recorded, exit status 0\n"
)


def write_demo_artifacts(root) -> dict[str, str]:
    """Materialize the demo sample and its artifact directory under root."""
    root = Path(root)
    artifacts = root / "artifacts"
    artifacts.mkdir(parents=True, exist_ok=True)
    binary = root / "sample.elf"
    binary.write_bytes(make_sample_binary("exfiltrator", 0))
    (artifacts / "emulation_results.txt").write_text(demo_emulog())
    (artifacts / "packets_1.pcap").write_bytes(demo_capture())
    (artifacts / "ip_trace.log").write_text(demo_pc_trace())
    (artifacts / "ip_flow_path.csv").write_text(demo_flow_csv())
    (artifacts / "qiling_output.txt").write_text(DEMO_RUNTIME_OUTPUT)
    return {"binary": str(binary), "artifacts": str(artifacts)}


# ---------------------------------------------------------------------------
# datasets and random graphs

def two_cluster_dataset(n: int = 1024, seed: int = 7, gap: float = 4.0) -> Dataset:
    """Two gaussian clusters separated on the first 8 feature dimensions."""
    rng = np.random.default_rng(seed)
    half = n // 2
    y = np.array([0] * half + [1] * (n - half), dtype=np.int64)
    x = rng.normal(0.0, 1.0, size=(n, DIM))
    x[y == 1, :8] += gap
    ids = tuple(f"s{i:04d}" for i in range(n))
    return Dataset(ids=ids, x=x, y=y)


def random_fcg(rng: np.random.Generator) -> CallGraph:
    n = int(rng.integers(0, 12))
    addrs = sorted({int(a) * 4 for a in rng.integers(0x1000, 0x10000, size=n)})
    nodes = {}
    for a in addrs:
        nodes[a] = FunctionFeatures(
            addr=a, name=f"f_{a:x}", n_blocks=int(rng.integers(1, 9)),
            total_bytes=int(rng.integers(4, 512)),
            avg_block_entropy=float(rng.random() * 8),
            std_block_entropy=float(rng.random()),
            bl_count=int(rng.integers(0, 12)),
            bl_indirect_count=int(rng.integers(0, 4)),
            svc_count=int(rng.integers(0, 4)),
            avg_bytes_per_block=float(rng.random() * 64),
            instr_count_est=float(rng.integers(1, 128)),
        )
    edges = set()
    if addrs:
        for _ in range(int(rng.integers(0, 3 * len(addrs) + 1))):
            u = addrs[int(rng.integers(0, len(addrs)))]
            v = addrs[int(rng.integers(0, len(addrs)))]
            edges.add((u, v))
    return CallGraph(binary_id=f"bin_{int(rng.integers(0, 1 << 30)):08x}",
                     nodes=nodes, edges=edges, dropped_call_targets=0)


def random_icfg(rng: np.random.Generator) -> Icfg:
    n = int(rng.integers(0, 16))
    addrs = sorted({int(a) * 4 for a in rng.integers(0x1000, 0x10000, size=n)})
    nodes = {a: IcfgNodeRec(addr=a, size=int(rng.integers(4, 128)) * 4,
                            entropy=float(rng.random() * 8)) for a in addrs}
    edges = set()
    if addrs:
        for _ in range(int(rng.integers(0, 3 * len(addrs) + 1))):
            u = addrs[int(rng.integers(0, len(addrs)))]
            v = addrs[int(rng.integers(0, len(addrs)))]
            edges.add((u, v))
    return Icfg(binary_id=f"bin_{int(rng.integers(0, 1 << 30)):08x}",
                nodes=nodes, edges=edges)
