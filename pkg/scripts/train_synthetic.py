"""Train a forest on generated sample binaries, end to end through the CLI.

Builds a labeled corpus of synthetic ELF files, writes a manifest, then
runs the same train command a user would: featurize every binary, fit
the forest, and save model.json, features.csv, and metrics.json.
"""

import argparse
import pathlib
import sys

from exfilpipe import cli, synth


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="trained", help="output directory")
    ap.add_argument("--per-class", type=int, default=12,
                    help="samples to generate per class (default 12)")
    ap.add_argument("--trees", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    root = pathlib.Path(args.out)
    bins = root / "bins"
    bins.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(2 * args.per_class):
        label = "exfiltrator" if i % 2 == 0 else "non_exfiltrator"
        path = bins / f"s{i:02d}.elf"
        path.write_bytes(synth.make_sample_binary(label, args.seed * 1000 + i))
        lines.append(f"{label}\t{path.resolve()}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} samples under {bins}")

    return cli.main(["train", str(manifest), "--out", str(root),
                     "--trees", str(args.trees), "--seed", str(args.seed)])


if __name__ == "__main__":
    sys.exit(main())
