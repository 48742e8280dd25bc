"""Write the built-in demo sample and its runtime artifacts to a directory.

The tree this produces is what the `pipeline` command expects: one ELF
binary plus an artifact directory with an emulation log, PC trace, flow
CSV, runtime output, and a packet capture.
"""

import argparse
import pathlib
import sys

from exfilpipe import synth


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", nargs="?", default="demo",
                    help="directory to create (default: ./demo)")
    args = ap.parse_args(argv)

    root = pathlib.Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    tree = synth.write_demo_artifacts(root)
    print(f"binary:    {tree['binary']}")
    print(f"artifacts: {tree['artifacts']}")
    print("next: exfilpipe pipeline "
          f"{tree['binary']} --model <model.json> --artifacts {tree['artifacts']} "
          "--offline --out reports")
    return 0


if __name__ == "__main__":
    sys.exit(main())
