"""ARM control-flow decoding and basic-block recovery.

Decodes the fixed-width 4-byte instruction subsets needed for control-flow
work — calls, branches, returns, supervisor calls — for both A64 (AArch64)
and A32 (classic 32-bit ARM). Everything else, including all data-processing
and memory instructions, classifies as Other. Thumb (T16/T32) is out of
scope: interworking targets are not followed, and odd (bit-0 set) entry
addresses are skipped.

Encoding masks follow the ARM Architecture Reference Manual; every constant
below was cross-checked against an independent reference assembler.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum

from .binfmt import Arch, BinaryImage, Endian, SymbolKind
from .errors import PipelineError

# degenerate-input bounds for one function's recovery
FUNC_BYTE_BUDGET = 1 << 20
FUNC_BLOCK_BUDGET = 65536

MODE_A32 = "A32"
MODE_A64 = "A64"


class NoExecutableCode(PipelineError):
    """The image has no non-empty executable section."""


class InstrKind(Enum):
    DIRECT_CALL = "DirectCall"
    INDIRECT_CALL = "IndirectCall"
    SUPERVISOR = "Supervisor"
    DIRECT_BRANCH = "DirectBranch"
    INDIRECT_BRANCH = "IndirectBranch"
    RETURN = "Return"
    OTHER = "Other"


class EdgeKind(Enum):
    FALLTHROUGH = "fallthrough"
    TAKEN = "taken"
    CALL = "call"
    CALL_RETURN = "call_return"


class SeedSource(Enum):
    SYMBOL = "symbol"
    ENTRY = "entry"
    CALL_TARGET = "call_target"
    PROLOGUE = "prologue"


@dataclass(frozen=True)
class Instr:
    addr: int
    kind: InstrKind
    target: int | None = None
    conditional: bool = False
    width: int = 4


@dataclass(frozen=True)
class FunctionSeed:
    addr: int
    name: str
    source: SeedSource


@dataclass(frozen=True)
class BasicBlock:
    addr: int
    size: int
    data: bytes
    instrs: tuple[Instr, ...]
    successors: tuple[tuple[int, EdgeKind], ...]


def _sext(value: int, bits: int) -> int:
    if value & (1 << (bits - 1)):
        return value - (1 << bits)
    return value


def _decode_a64(word: int, addr: int) -> Instr:
    top6 = word >> 26
    if top6 == 0b100101:  # BL imm26
        target = addr + _sext(word & 0x3FFFFFF, 26) * 4
        return Instr(addr, InstrKind.DIRECT_CALL, target=target)
    if top6 == 0b000101:  # B imm26
        target = addr + _sext(word & 0x3FFFFFF, 26) * 4
        return Instr(addr, InstrKind.DIRECT_BRANCH, target=target, conditional=False)
    masked = word & 0xFFFFFC1F
    if masked == 0xD63F0000:  # BLR Xn
        return Instr(addr, InstrKind.INDIRECT_CALL)
    if masked == 0xD61F0000:  # BR Xn
        return Instr(addr, InstrKind.INDIRECT_BRANCH)
    if masked == 0xD65F0000:  # RET {Xn}
        return Instr(addr, InstrKind.RETURN)
    if word & 0xFF000010 == 0x54000000:  # B.cond imm19
        target = addr + _sext((word >> 5) & 0x7FFFF, 19) * 4
        return Instr(addr, InstrKind.DIRECT_BRANCH, target=target, conditional=True)
    if word & 0x7E000000 == 0x34000000:  # CBZ/CBNZ imm19
        target = addr + _sext((word >> 5) & 0x7FFFF, 19) * 4
        return Instr(addr, InstrKind.DIRECT_BRANCH, target=target, conditional=True)
    if word & 0x7E000000 == 0x36000000:  # TBZ/TBNZ imm14
        target = addr + _sext((word >> 5) & 0x3FFF, 14) * 4
        return Instr(addr, InstrKind.DIRECT_BRANCH, target=target, conditional=True)
    if word & 0xFFE0001F == 0xD4000001:  # SVC #imm16
        return Instr(addr, InstrKind.SUPERVISOR)
    return Instr(addr, InstrKind.OTHER)


def _decode_a32(word: int, addr: int) -> Instr:
    cond = (word >> 28) & 0xF
    if cond == 0xF:
        # unconditional space: BLX immediate is the only transfer we take.
        # The halfword (Thumb) offset bit is dropped to keep targets 4-aligned.
        if word & 0x0E000000 == 0x0A000000:
            target = addr + 8 + _sext(word & 0xFFFFFF, 24) * 4
            return Instr(addr, InstrKind.DIRECT_CALL, target=target)
        return Instr(addr, InstrKind.OTHER)
    op = word & 0x0F000000
    if op == 0x0B000000:  # BL imm24 (PC+8 pipeline base)
        target = addr + 8 + _sext(word & 0xFFFFFF, 24) * 4
        return Instr(addr, InstrKind.DIRECT_CALL, target=target)
    if op == 0x0A000000:  # B imm24
        target = addr + 8 + _sext(word & 0xFFFFFF, 24) * 4
        return Instr(addr, InstrKind.DIRECT_BRANCH, target=target, conditional=cond != 0xE)
    if word & 0x0FFFFFF0 == 0x012FFF30:  # BLX Rm
        return Instr(addr, InstrKind.INDIRECT_CALL)
    if word & 0x0FFFFFF0 == 0x012FFF10:  # BX Rm (BX LR is a return)
        if word & 0xF == 14:
            return Instr(addr, InstrKind.RETURN)
        return Instr(addr, InstrKind.INDIRECT_BRANCH)
    if word & 0x0FFFFFFF == 0x01A0F00E:  # MOV pc, lr
        return Instr(addr, InstrKind.RETURN)
    if word & 0x0FFF0000 == 0x08BD0000 and word & 0x8000:  # POP {..., pc}
        return Instr(addr, InstrKind.RETURN)
    if word & 0x0FFFF000 == 0x049DF000:  # LDR pc, [sp], #imm (single-reg pop)
        return Instr(addr, InstrKind.RETURN)
    if op == 0x0F000000:  # SVC/SWI #imm24
        return Instr(addr, InstrKind.SUPERVISOR)
    return Instr(addr, InstrKind.OTHER)


def decode_instr(word: int, addr: int, mode: str) -> Instr:
    """Classify one 4-byte instruction word; total over all 2^32 values."""
    if mode == MODE_A64:
        return _decode_a64(word & 0xFFFFFFFF, addr)
    if mode == MODE_A32:
        return _decode_a32(word & 0xFFFFFFFF, addr)
    raise ValueError(f"unknown decode mode {mode!r}")


def is_prologue(word: int, mode: str) -> bool:
    """Match the canonical frame-setup word that opens a function.

    A64: STP x29, x30, [sp, #-N]! (pre-indexed, negative offset).
    A32: PUSH {..., lr} — both the STMDB sp! form and the single-register
    STR lr, [sp, #-4]! form that assemblers emit for "push {lr}".
    """
    word &= 0xFFFFFFFF
    if mode == MODE_A64:
        return word & 0xFFC07FFF == 0xA9807BFD and bool(word & 0x00200000)
    if (word >> 28) & 0xF == 0xF:
        return False
    if word & 0x0FFF0000 == 0x092D0000 and word & 0x4000:
        return True
    return word & 0x0FFFFFFF == 0x052DE004


def mode_for(image: BinaryImage) -> str:
    return MODE_A64 if image.meta.arch is Arch.ARM64 else MODE_A32


_TERMINATORS = frozenset({
    InstrKind.DIRECT_CALL,
    InstrKind.INDIRECT_CALL,
    InstrKind.DIRECT_BRANCH,
    InstrKind.INDIRECT_BRANCH,
    InstrKind.RETURN,
})


def build_blocks(image: BinaryImage, func: FunctionSeed,
                 known_funcs: list[int]) -> list[BasicBlock]:
    """Recover basic blocks by recursive descent from func.addr.

    Traversal stays within [func.addr, limit) where limit is the next known
    function start or the section end, whichever comes first. Branch targets
    inside the range become leaders; Return and IndirectBranch stop descent;
    calls end their block with a call_return fallthrough. Supervisor calls do
    not transfer control and never end a block.
    """
    sec = image.section_containing(func.addr)
    if sec is None:
        return []
    data = image.section_bytes(sec)
    base = sec.vaddr
    sec_end = sec.vaddr + sec.size
    fmt = "<I" if image.meta.endian is Endian.LITTLE else ">I"
    mode = mode_for(image)

    i = bisect_right(known_funcs, func.addr)
    limit = sec_end
    if i < len(known_funcs) and known_funcs[i] < sec_end:
        limit = known_funcs[i]

    def in_range(a: int) -> bool:
        return func.addr <= a < limit

    decoded: dict[int, Instr] = {}
    leaders = {func.addr}
    queue = [func.addr]
    exhausted = False
    while queue:
        a = queue.pop()
        while a not in decoded:
            if a + 4 > sec_end or not in_range(a):
                break
            if len(decoded) * 4 >= FUNC_BYTE_BUDGET or len(leaders) >= FUNC_BLOCK_BUDGET:
                exhausted = True
                break
            word = struct.unpack_from(fmt, data, a - base)[0]
            ins = decode_instr(word, a, mode)
            decoded[a] = ins
            if ins.kind not in _TERMINATORS:
                a += 4
                continue
            if ins.kind is InstrKind.DIRECT_BRANCH:
                if ins.target is not None and in_range(ins.target):
                    leaders.add(ins.target)
                    queue.append(ins.target)
                if not ins.conditional:
                    break
            elif ins.kind in (InstrKind.RETURN, InstrKind.INDIRECT_BRANCH):
                break
            # conditional branch and both call kinds continue at addr+4
            nxt = a + 4
            if in_range(nxt):
                leaders.add(nxt)
                queue.append(nxt)
            break
        if exhausted:
            break

    if not decoded:
        return []

    addrs = sorted(decoded)
    blocks: list[BasicBlock] = []
    run: list[Instr] = []
    for a in addrs:
        if run and (a != run[-1].addr + 4 or a in leaders):
            blocks.append(_finish_block(run, decoded, data, base))
            run = []
        run.append(decoded[a])
        if decoded[a].kind in _TERMINATORS:
            blocks.append(_finish_block(run, decoded, data, base))
            run = []
    if run:
        blocks.append(_finish_block(run, decoded, data, base))
    return blocks[:FUNC_BLOCK_BUDGET]


def _finish_block(instrs: list[Instr], decoded: dict[int, Instr], data: bytes,
                  base: int) -> BasicBlock:
    start = instrs[0].addr
    size = 4 * len(instrs)
    last = instrs[-1]
    nxt = last.addr + 4
    succ: list[tuple[int, EdgeKind]] = []
    kind = last.kind
    if kind is InstrKind.DIRECT_BRANCH:
        if last.target is not None:
            succ.append((last.target, EdgeKind.TAKEN))
        if last.conditional and nxt in decoded:
            succ.append((nxt, EdgeKind.FALLTHROUGH))
    elif kind is InstrKind.DIRECT_CALL:
        if last.target is not None:
            succ.append((last.target, EdgeKind.CALL))
        if nxt in decoded:
            succ.append((nxt, EdgeKind.CALL_RETURN))
    elif kind is InstrKind.INDIRECT_CALL:
        if nxt in decoded:
            succ.append((nxt, EdgeKind.CALL_RETURN))
    elif kind in (InstrKind.RETURN, InstrKind.INDIRECT_BRANCH):
        pass
    elif nxt in decoded:
        # split by a leader or stopped at the range end mid-stream
        succ.append((nxt, EdgeKind.FALLTHROUGH))
    off = start - base
    return BasicBlock(addr=start, size=size, data=data[off : off + size],
                      instrs=tuple(instrs), successors=tuple(succ))


class _Coverage:
    """Sorted disjoint byte intervals with point-containment lookup."""

    def __init__(self, ranges: list[tuple[int, int]]):
        merged: list[tuple[int, int]] = []
        for start, end in sorted(ranges):
            if merged and start <= merged[-1][1]:
                prev = merged[-1]
                merged[-1] = (prev[0], max(prev[1], end))
            else:
                merged.append((start, end))
        self._starts = [r[0] for r in merged]
        self._ends = [r[1] for r in merged]

    def covers(self, addr: int) -> bool:
        i = bisect_right(self._starts, addr) - 1
        return i >= 0 and addr < self._ends[i]


def discover_functions(image: BinaryImage) -> list[FunctionSeed]:
    """Enumerate function entry points from symbols, the ELF entry, direct
    call targets (iterated to a fixed point), and a prologue scan over bytes
    no recovered block covers. Idempotent and sorted by address."""
    exec_secs = image.exec_sections()
    if not exec_secs:
        raise NoExecutableCode("no executable section with bytes")
    mode = mode_for(image)
    fmt = "<I" if image.meta.endian is Endian.LITTLE else ">I"

    seeds: dict[int, tuple[str | None, SeedSource]] = {}

    def try_add(addr: int, name: str | None, source: SeedSource) -> bool:
        if mode == MODE_A32:
            addr &= ~1
        if addr % 4 or addr in seeds:
            return False
        if image.section_containing(addr) is None:
            return False
        seeds[addr] = (name, source)
        return True

    for sym in image.symbols:
        if sym.kind is SymbolKind.FUNCTION and sym.defined:
            try_add(sym.value, sym.name or None, SeedSource.SYMBOL)
    try_add(image.meta.entry, None, SeedSource.ENTRY)

    while True:
        known = sorted(seeds)
        all_blocks: list[BasicBlock] = []
        for addr in known:
            name, source = seeds[addr]
            fseed = FunctionSeed(addr, name or f"sub_{addr:x}", source)
            all_blocks.extend(build_blocks(image, fseed, known))
        cov = _Coverage([(b.addr, b.addr + b.size) for b in all_blocks])

        added = False
        for b in all_blocks:
            for ins in b.instrs:
                if ins.kind is InstrKind.DIRECT_CALL and ins.target is not None:
                    if not cov.covers(ins.target):
                        added |= try_add(ins.target, None, SeedSource.CALL_TARGET)
        if added:
            continue

        for sec in exec_secs:
            data = image.section_bytes(sec)
            for off in range(0, len(data) - 3, 4):
                addr = sec.vaddr + off
                if addr in seeds or cov.covers(addr):
                    continue
                word = struct.unpack_from(fmt, data, off)[0]
                if is_prologue(word, mode):
                    added |= try_add(addr, None, SeedSource.PROLOGUE)
        if not added:
            break

    out = []
    for addr in sorted(seeds):
        name, source = seeds[addr]
        out.append(FunctionSeed(addr=addr, name=name or f"sub_{addr:x}", source=source))
    return out
