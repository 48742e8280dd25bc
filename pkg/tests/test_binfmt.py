import pytest

import oracles
from exfilpipe import binfmt, synth
from exfilpipe.binfmt import Arch, Endian, Libc, SymbolKind

BASE = 0x400000
COMBOS = [(64, "<"), (64, ">"), (32, "<"), (32, ">")]


def _tiny_elf(bits, endian, **kw):
    code = synth.assemble([synth.A64_NOP, synth.A64_RET], endian)
    return synth.make_text_elf(code, [("f", BASE, 8, True)], bits=bits,
                               endian=endian, entry=BASE, **kw)


@pytest.mark.parametrize("bits,endian", COMBOS)
def test_header_fields_match_offset_reads(bits, endian):
    elf = _tiny_elf(bits, endian)
    h = oracles.read_elf_header(elf)
    img = binfmt.parse_binary(elf)
    assert img.meta.bits == bits == h["bits"]
    assert img.meta.endian.value == h["byteorder"]
    assert img.meta.machine_code == h["e_machine"] == (0xB7 if bits == 64 else 0x28)
    assert img.meta.entry == h["e_entry"] == BASE
    assert img.meta.arch is (Arch.ARM64 if bits == 64 else Arch.ARM32)
    assert img.meta.elf_type == h["e_type"] == 2


@pytest.mark.parametrize("bits,endian", COMBOS)
def test_section_names_come_from_the_string_table(bits, endian):
    elf = _tiny_elf(bits, endian)
    parsed = {s.name for s in binfmt.parse_binary(elf).sections}
    oracle_names = set(oracles.read_section_names(elf))
    assert ".text" in parsed
    assert parsed <= oracle_names  # parser drops only the null entry


@pytest.mark.parametrize("bits,endian", COMBOS)
def test_text_bytes_round_trip(bits, endian):
    code = synth.assemble([synth.a64_movz(0, 7), synth.A64_RET], endian)
    elf = synth.make_text_elf(code, [("f", BASE, 8, True)], bits=bits,
                              endian=endian)
    img = binfmt.parse_binary(elf)
    text = next(s for s in img.sections if s.name == ".text")
    assert text.executable
    assert text.vaddr == BASE
    assert img.section_bytes(text) == code


def test_symbols_are_sorted_and_merged():
    code = synth.assemble([synth.A64_RET] * 4)
    elf = synth.make_text_elf(
        code, [("zzz", BASE, 4, True), ("aaa", BASE + 4, 4, True)],
        imports=("socket", "connect"))
    img = binfmt.parse_binary(elf)
    keys = [(s.value, s.name) for s in img.symbols]
    assert keys == sorted(keys)
    assert len({(s.name, s.value) for s in img.symbols}) == len(img.symbols)
    by_name = {s.name: s for s in img.symbols}
    assert by_name["zzz"].defined and by_name["zzz"].kind is SymbolKind.FUNCTION
    assert not by_name["socket"].defined
    assert img.dynamic.imported_symbols == ("socket", "connect")


def test_nobits_section_has_zero_size():
    text = synth.SynthSection(".text", BASE, synth.assemble([synth.A64_RET]),
                              executable=True)
    bss = synth.SynthSection(".bss", BASE + 0x1000, b"\x00" * 64, nobits=True)
    elf = synth.build_elf(sections=[text, bss])
    img = binfmt.parse_binary(elf)
    rec = next(s for s in img.sections if s.name == ".bss")
    assert rec.size == 0


def test_sectionless_image_synthesizes_load_sections():
    elf = _tiny_elf(64, "<", include_shdrs=False)
    img = binfmt.parse_binary(elf)
    assert img.sections
    assert all(s.name.startswith("load") for s in img.sections)
    assert any(s.executable for s in img.sections)


def test_needed_and_interp_flow_through():
    elf = _tiny_elf(64, "<", needed=("libc.so.6", "libm.so.6"),
                    interp="/lib/ld-linux-aarch64.so.1")
    img = binfmt.parse_binary(elf)
    assert img.dynamic.needed_libs == ("libc.so.6", "libm.so.6")
    assert img.dynamic.interp_path == "/lib/ld-linux-aarch64.so.1"


@pytest.mark.parametrize("needed,interp,expected", [
    (("libc.so.6",), None, Libc.GLIBC),
    ((), "/lib/ld-linux-armhf.so.3", Libc.GLIBC),
    (("libuClibc-0.9.33.2.so",), None, Libc.UCLIBC),
    ((), "/lib/ld-musl-armhf.so.1", Libc.MUSL),
    (("libcustom.so",), None, Libc.UNKNOWN),
    ((), None, Libc.UNKNOWN),
])
def test_libc_detection(needed, interp, expected):
    elf = _tiny_elf(64, "<", needed=needed, interp=interp)
    img = binfmt.parse_binary(elf)
    env = binfmt.detect_environment(img.meta, img.dynamic)
    assert env.libc is expected
    assert (env.arch, env.endian, env.bits) == (Arch.ARM64, Endian.LITTLE, 64)


def test_rejects_non_elf():
    with pytest.raises(binfmt.NotElf):
        binfmt.parse_binary(b"MZ\x90\x00" + b"\x00" * 100)


def test_rejects_truncated_header():
    elf = _tiny_elf(64, "<")
    with pytest.raises(binfmt.Truncated):
        binfmt.parse_binary(elf[:40])


def test_rejects_truncated_section_table():
    elf = _tiny_elf(64, "<")
    with pytest.raises(binfmt.Truncated):
        binfmt.parse_binary(elf[:-20])


def test_rejects_foreign_machine():
    elf = _tiny_elf(64, "<", )
    patched = bytearray(elf)
    patched[18:20] = (0x3E).to_bytes(2, "little")  # x86-64
    with pytest.raises(binfmt.UnsupportedMachine):
        binfmt.parse_binary(bytes(patched))


def test_rejects_bad_class_byte():
    elf = bytearray(_tiny_elf(64, "<"))
    elf[4] = 7
    with pytest.raises(binfmt.MalformedHeader):
        binfmt.parse_binary(bytes(elf))


def test_manifest_round_trip(tmp_path):
    b1 = tmp_path / "one.elf"
    b2 = tmp_path / "sub" / "two.elf"
    b2.parent.mkdir()
    b1.write_bytes(_tiny_elf(64, "<"))
    b2.write_bytes(_tiny_elf(32, "<"))
    man = tmp_path / "manifest.tsv"
    man.write_text("# comment\n"
                   f"exfiltrator\t{b1}\n"
                   "non_exfiltrator\tsub/two.elf\n")
    rows = binfmt.load_manifest(man)
    assert [(p.name, label) for p, label in rows] == [
        ("one.elf", "exfiltrator"), ("two.elf", "non_exfiltrator")]


def test_manifest_rejects_unknown_label(tmp_path):
    man = tmp_path / "m.tsv"
    man.write_text("virus\t/nonexistent\n")
    with pytest.raises(binfmt.UnknownLabel):
        binfmt.load_manifest(man)


def test_manifest_rejects_missing_file(tmp_path):
    man = tmp_path / "m.tsv"
    man.write_text("exfiltrator\tnot_there.elf\n")
    with pytest.raises(binfmt.MissingFile):
        binfmt.load_manifest(man)
