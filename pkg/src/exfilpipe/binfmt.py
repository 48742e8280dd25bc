"""ARM Linux ELF loading and environment detection.

Parses 32- and 64-bit ELF images in either byte order using plain struct
unpacking and keeps only what downstream analysis needs: section map, merged
symbol table, dynamic-linking info, and an environment profile (libc flavor).

Parsing is total: arbitrary input bytes either produce a BinaryImage or raise
one of the classified errors below, with bounded memory either way.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import PipelineError

ELF_MAGIC = b"\x7fELF"

# e_ident indices
EI_CLASS = 4
EI_DATA = 5

ELFCLASS32 = 1
ELFCLASS64 = 2
ELFDATA2LSB = 1
ELFDATA2MSB = 2

# accepted e_machine values
EM_ARM = 0x28
EM_AARCH64 = 0xB7

# section header types
SHT_NULL = 0
SHT_SYMTAB = 2
SHT_STRTAB = 3
SHT_DYNAMIC = 6
SHT_NOBITS = 8
SHT_DYNSYM = 11

SHF_EXECINSTR = 0x4

# program header types / flags
PT_LOAD = 1
PT_DYNAMIC = 2
PT_INTERP = 3
PF_X = 0x1

# dynamic tags
DT_NULL = 0
DT_NEEDED = 1
DT_STRTAB = 5

# symbol types (low nibble of st_info)
STT_OBJECT = 1
STT_FUNC = 2

SHN_UNDEF = 0


class NotElf(PipelineError):
    """Input does not begin with the ELF magic."""


class UnsupportedMachine(PipelineError):
    """e_machine is neither ARM32 (0x28) nor ARM64 (0xB7)."""


class Truncated(PipelineError):
    """A header or table extends past the end of the file."""


class MalformedHeader(PipelineError):
    """Header fields are internally inconsistent."""


class UnknownLabel(PipelineError):
    """Manifest line carries a label outside the accepted set."""


class MissingFile(PipelineError):
    """Manifest references a sample path that does not exist."""


class Arch(Enum):
    ARM32 = "ARM32"
    ARM64 = "ARM64"


class Endian(Enum):
    LITTLE = "little"
    BIG = "big"


class Libc(Enum):
    GLIBC = "glibc"
    UCLIBC = "uclibc"
    MUSL = "musl"
    UNKNOWN = "unknown"


class SymbolKind(Enum):
    FUNCTION = "function"
    OBJECT = "object"
    OTHER = "other"


@dataclass(frozen=True)
class ElfMeta:
    arch: Arch
    endian: Endian
    bits: int
    entry: int
    machine_code: int
    elf_type: int


@dataclass(frozen=True)
class Section:
    name: str
    vaddr: int
    offset: int
    size: int
    executable: bool


@dataclass(frozen=True)
class SymbolRecord:
    name: str
    value: int
    size: int
    kind: SymbolKind
    defined: bool


@dataclass(frozen=True)
class DynamicInfo:
    needed_libs: tuple[str, ...] = ()
    interp_path: str | None = None
    imported_symbols: tuple[str, ...] = ()


@dataclass(frozen=True)
class EnvProfile:
    arch: Arch
    endian: Endian
    bits: int
    libc: Libc


@dataclass(frozen=True)
class BinaryImage:
    """Immutable parsed ELF; safe to share across concurrent readers."""

    path: str
    raw: bytes
    meta: ElfMeta
    sections: tuple[Section, ...]
    symbols: tuple[SymbolRecord, ...]
    dynamic: DynamicInfo

    def section_bytes(self, section: Section) -> bytes:
        return self.raw[section.offset : section.offset + section.size]

    def exec_sections(self) -> list[Section]:
        return [s for s in self.sections if s.executable and s.size > 0]

    def section_containing(self, vaddr: int, executable_only: bool = True) -> Section | None:
        for s in self.sections:
            if executable_only and not s.executable:
                continue
            if s.size > 0 and s.vaddr <= vaddr < s.vaddr + s.size:
                return s
        return None


@dataclass(frozen=True)
class _RawShdr:
    name_off: int
    sh_type: int
    flags: int
    vaddr: int
    offset: int
    size: int
    link: int
    entsize: int


@dataclass(frozen=True)
class _RawPhdr:
    p_type: int
    flags: int
    offset: int
    vaddr: int
    filesz: int


def _cstr(data: bytes, off: int) -> str:
    """NUL-terminated string at off; out-of-range or unterminated tails tolerated."""
    if off < 0 or off >= len(data):
        return ""
    end = data.find(b"\x00", off)
    if end < 0:
        end = len(data)
    return data[off:end].decode("utf-8", errors="replace")


def _u16(raw: bytes, off: int, end: str) -> int:
    return struct.unpack_from(end + "H", raw, off)[0]


def load_binary(path: str | Path) -> BinaryImage:
    """Read and parse an ARM ELF file from disk."""
    p = Path(path)
    return parse_binary(p.read_bytes(), str(p))


def parse_binary(raw: bytes, path: str = "<memory>") -> BinaryImage:
    """Parse ELF bytes into a BinaryImage; total over arbitrary input."""
    if len(raw) < 4 or raw[:4] != ELF_MAGIC:
        raise NotElf("missing ELF magic")
    if len(raw) < 52:
        raise Truncated("file shorter than the 32-bit ELF header")

    ei_class = raw[EI_CLASS]
    ei_data = raw[EI_DATA]
    if ei_class not in (ELFCLASS32, ELFCLASS64):
        raise MalformedHeader(f"bad EI_CLASS {ei_class}")
    if ei_data not in (ELFDATA2LSB, ELFDATA2MSB):
        raise MalformedHeader(f"bad EI_DATA {ei_data}")

    bits = 32 if ei_class == ELFCLASS32 else 64
    end = "<" if ei_data == ELFDATA2LSB else ">"
    endian = Endian.LITTLE if ei_data == ELFDATA2LSB else Endian.BIG
    if bits == 64 and len(raw) < 64:
        raise Truncated("file shorter than the 64-bit ELF header")

    e_type = _u16(raw, 16, end)
    e_machine = _u16(raw, 18, end)
    if e_machine not in (EM_ARM, EM_AARCH64):
        raise UnsupportedMachine(f"e_machine 0x{e_machine:x} is not ARM32/ARM64")
    if e_machine == EM_ARM and bits != 32:
        raise MalformedHeader("ARM32 machine with 64-bit ELF class")
    if e_machine == EM_AARCH64 and bits != 64:
        raise MalformedHeader("ARM64 machine with 32-bit ELF class")
    arch = Arch.ARM32 if e_machine == EM_ARM else Arch.ARM64

    if bits == 32:
        entry, phoff, shoff = struct.unpack_from(end + "III", raw, 24)
        phentsize, phnum, shentsize, shnum, shstrndx = struct.unpack_from(end + "HHHHH", raw, 42)
        min_shent, min_phent = 0x28, 0x20
    else:
        entry, phoff, shoff = struct.unpack_from(end + "QQQ", raw, 24)
        phentsize, phnum, shentsize, shnum, shstrndx = struct.unpack_from(end + "HHHHH", raw, 54)
        min_shent, min_phent = 0x40, 0x38

    meta = ElfMeta(arch=arch, endian=endian, bits=bits, entry=entry,
                   machine_code=e_machine, elf_type=e_type)

    phdrs = _parse_phdrs(raw, end, bits, phoff, phentsize, phnum, min_phent)
    shdrs = _parse_shdrs(raw, end, bits, shoff, shentsize, shnum, min_shent)

    if shdrs:
        sections = _sections_from_shdrs(raw, shdrs, shstrndx)
    else:
        sections = _sections_from_phdrs(raw, phdrs)

    symbols = _parse_symbols(raw, end, bits, shdrs)
    dynamic = _parse_dynamic(raw, end, bits, shdrs, phdrs, sections)

    return BinaryImage(path=path, raw=raw, meta=meta, sections=tuple(sections),
                       symbols=tuple(symbols), dynamic=dynamic)


def _parse_phdrs(raw: bytes, end: str, bits: int, phoff: int, phentsize: int,
                 phnum: int, min_phent: int) -> list[_RawPhdr]:
    if phnum == 0:
        return []
    if phentsize < min_phent:
        raise MalformedHeader(f"e_phentsize {phentsize} below minimum {min_phent}")
    if phoff + phnum * phentsize > len(raw):
        raise Truncated("program header table extends past end of file")
    out = []
    for i in range(phnum):
        off = phoff + i * phentsize
        if bits == 32:
            p_type, p_offset, p_vaddr, _paddr, filesz, _memsz, flags = struct.unpack_from(
                end + "IIIIIII", raw, off)
        else:
            p_type, flags, p_offset, p_vaddr, _paddr, filesz, _memsz = struct.unpack_from(
                end + "IIQQQQQ", raw, off)
        out.append(_RawPhdr(p_type=p_type, flags=flags, offset=p_offset,
                            vaddr=p_vaddr, filesz=filesz))
    return out


def _parse_shdrs(raw: bytes, end: str, bits: int, shoff: int, shentsize: int,
                 shnum: int, min_shent: int) -> list[_RawShdr]:
    if shnum == 0 or shoff == 0:
        return []
    if shentsize < min_shent:
        raise MalformedHeader(f"e_shentsize {shentsize} below minimum {min_shent}")
    if shoff + shnum * shentsize > len(raw):
        raise Truncated("section header table extends past end of file")
    out = []
    for i in range(shnum):
        off = shoff + i * shentsize
        if bits == 32:
            name_off, sh_type, flags, vaddr, offset, size, link, _info, _align, entsize = (
                struct.unpack_from(end + "10I", raw, off))
        else:
            name_off, sh_type = struct.unpack_from(end + "II", raw, off)
            flags, vaddr, offset, size = struct.unpack_from(end + "QQQQ", raw, off + 8)
            link, _info = struct.unpack_from(end + "II", raw, off + 40)
            entsize = struct.unpack_from(end + "Q", raw, off + 56)[0]
        out.append(_RawShdr(name_off=name_off, sh_type=sh_type, flags=flags, vaddr=vaddr,
                            offset=offset, size=size, link=link, entsize=entsize))
    return out


def _sections_from_shdrs(raw: bytes, shdrs: list[_RawShdr], shstrndx: int) -> list[Section]:
    names: bytes = b""
    if shstrndx != SHN_UNDEF:
        if shstrndx >= len(shdrs):
            raise MalformedHeader(f"e_shstrndx {shstrndx} out of range")
        strsec = shdrs[shstrndx]
        if strsec.sh_type != SHT_NOBITS:
            if strsec.offset + strsec.size > len(raw):
                raise Truncated("section name table extends past end of file")
            names = raw[strsec.offset : strsec.offset + strsec.size]
    sections = []
    for sh in shdrs[1:]:  # index 0 is the null section
        if sh.sh_type == SHT_NULL:
            continue
        # NOBITS occupies no file bytes; keep the range invariant uniform
        size = 0 if sh.sh_type == SHT_NOBITS else sh.size
        if sh.offset + size > len(raw):
            raise Truncated("section data extends past end of file")
        sections.append(Section(name=_cstr(names, sh.name_off), vaddr=sh.vaddr,
                                offset=sh.offset, size=size,
                                executable=bool(sh.flags & SHF_EXECINSTR)))
    return sections


def _sections_from_phdrs(raw: bytes, phdrs: list[_RawPhdr]) -> list[Section]:
    """Section-less images: one synthetic section per loadable segment."""
    sections = []
    n = 0
    for ph in phdrs:
        if ph.p_type != PT_LOAD:
            continue
        if ph.offset + ph.filesz > len(raw):
            raise Truncated("loadable segment extends past end of file")
        sections.append(Section(name=f"load{n}", vaddr=ph.vaddr, offset=ph.offset,
                                size=ph.filesz, executable=bool(ph.flags & PF_X)))
        n += 1
    return sections


def _symbols_from_table(raw: bytes, end: str, bits: int, sym_sh: _RawShdr,
                        shdrs: list[_RawShdr]) -> list[tuple[str, int, int, SymbolKind, bool]]:
    entsize = 16 if bits == 32 else 24
    if sym_sh.offset + sym_sh.size > len(raw):
        raise Truncated("symbol table extends past end of file")
    strtab = b""
    if 0 <= sym_sh.link < len(shdrs):
        st = shdrs[sym_sh.link]
        if st.offset + st.size <= len(raw):
            strtab = raw[st.offset : st.offset + st.size]
    count = sym_sh.size // entsize
    out = []
    for i in range(1, count):  # index 0 is the reserved null symbol
        off = sym_sh.offset + i * entsize
        if bits == 32:
            name_off, value, size, info, _other, shndx = struct.unpack_from(end + "IIIBBH", raw, off)
        else:
            name_off, info, _other, shndx, value, size = struct.unpack_from(end + "IBBHQQ", raw, off)
        name = _cstr(strtab, name_off)
        if not name and value == 0:
            continue
        st_type = info & 0xF
        kind = (SymbolKind.FUNCTION if st_type == STT_FUNC
                else SymbolKind.OBJECT if st_type == STT_OBJECT
                else SymbolKind.OTHER)
        out.append((name, value, size, kind, shndx != SHN_UNDEF))
    return out


def _parse_symbols(raw: bytes, end: str, bits: int, shdrs: list[_RawShdr]) -> list[SymbolRecord]:
    static_rows: list[tuple] = []
    dyn_rows: list[tuple] = []
    for sh in shdrs:
        if sh.sh_type == SHT_SYMTAB:
            static_rows.extend(_symbols_from_table(raw, end, bits, sh, shdrs))
        elif sh.sh_type == SHT_DYNSYM:
            dyn_rows.extend(_symbols_from_table(raw, end, bits, sh, shdrs))
    # merge on (name, value); static names preferred
    merged: dict[tuple[str, int], tuple] = {}
    for row in static_rows:
        merged.setdefault((row[0], row[1]), row)
    for row in dyn_rows:
        merged.setdefault((row[0], row[1]), row)
    rows = sorted(merged.values(), key=lambda r: (r[1], r[0]))
    return [SymbolRecord(name=n, value=v, size=s, kind=k, defined=d) for n, v, s, k, d in rows]


def _vaddr_to_offset(vaddr: int, sections: list[Section]) -> int | None:
    for s in sections:
        if s.size > 0 and s.vaddr <= vaddr < s.vaddr + s.size:
            return s.offset + (vaddr - s.vaddr)
    return None


def _parse_dynamic(raw: bytes, end: str, bits: int, shdrs: list[_RawShdr],
                   phdrs: list[_RawPhdr], sections: list[Section]) -> DynamicInfo:
    entsize = 8 if bits == 32 else 16
    fmt = end + ("iI" if bits == 32 else "qQ")

    dyn_off = dyn_size = None
    strtab = b""
    for sh in shdrs:
        if sh.sh_type == SHT_DYNAMIC:
            dyn_off, dyn_size = sh.offset, sh.size
            if 0 <= sh.link < len(shdrs):
                st = shdrs[sh.link]
                if st.offset + st.size <= len(raw):
                    strtab = raw[st.offset : st.offset + st.size]
            break
    if dyn_off is None:
        for ph in phdrs:
            if ph.p_type == PT_DYNAMIC:
                dyn_off, dyn_size = ph.offset, ph.filesz
                break

    needed: list[str] = []
    if dyn_off is not None:
        if dyn_off + dyn_size > len(raw):
            raise Truncated("dynamic section extends past end of file")
        entries = []
        for i in range(dyn_size // entsize):
            tag, val = struct.unpack_from(fmt, raw, dyn_off + i * entsize)
            if tag == DT_NULL:
                break
            entries.append((tag, val))
        if not strtab:
            for tag, val in entries:
                if tag == DT_STRTAB:
                    off = _vaddr_to_offset(val, sections)
                    if off is not None:
                        strtab = raw[off:]
                    break
        for tag, val in entries:
            if tag == DT_NEEDED:
                name = _cstr(strtab, val)
                if name and name not in needed:
                    needed.append(name)

    interp = None
    for ph in phdrs:
        if ph.p_type == PT_INTERP and ph.filesz > 0:
            if ph.offset + ph.filesz > len(raw):
                raise Truncated("interpreter path extends past end of file")
            interp = _cstr(raw, ph.offset)
            break
    if interp is None:
        for s in sections:
            if s.name == ".interp" and s.size > 0:
                interp = _cstr(raw, s.offset)
                break

    imports: list[str] = []
    for sh in shdrs:
        if sh.sh_type == SHT_DYNSYM:
            for name, _value, _size, _kind, defined in _symbols_from_table(raw, end, bits, sh, shdrs):
                if not defined and name and name not in imports:
                    imports.append(name)
    return DynamicInfo(needed_libs=tuple(needed), interp_path=interp,
                       imported_symbols=tuple(imports))


_GLIBC_MARKS = ("libc.so.6", "ld-linux")
_UCLIBC_MARK = "uclibc"
_MUSL_MARK = "musl"


def detect_environment(meta: ElfMeta, dynamic: DynamicInfo) -> EnvProfile:
    """Classify the target C library from the interpreter path and needed libs."""
    candidates = []
    if dynamic.interp_path:
        candidates.append(dynamic.interp_path)
    candidates.extend(dynamic.needed_libs)
    libc = Libc.UNKNOWN
    for cand in candidates:
        low = cand.lower()
        if any(m in cand for m in _GLIBC_MARKS):
            libc = Libc.GLIBC
        elif _UCLIBC_MARK in low:
            libc = Libc.UCLIBC
        elif _MUSL_MARK in low:
            libc = Libc.MUSL
        else:
            continue
        break
    return EnvProfile(arch=meta.arch, endian=meta.endian, bits=meta.bits, libc=libc)


LABELS = ("exfiltrator", "non_exfiltrator")


def load_manifest(path: str | Path) -> list[tuple[Path, str]]:
    """Read a labeled sample manifest: one "label<TAB>path" record per line.

    Lines starting with '#' and blank lines are ignored. Paths are resolved
    relative to the manifest's directory. Order is preserved.
    """
    p = Path(path)
    base = p.parent
    out: list[tuple[Path, str]] = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        label, sep, sample = line.partition("\t")
        label = label.strip()
        if not sep or label not in LABELS:
            raise UnknownLabel(f"line {lineno}: unknown label {label!r}")
        sample_path = Path(sample.strip())
        if not sample_path.is_absolute():
            sample_path = base / sample_path
        if not sample_path.is_file():
            raise MissingFile(f"line {lineno}: sample not found: {sample_path}")
        out.append((sample_path, label))
    return out
