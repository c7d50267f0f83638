#!/usr/bin/env python3
"""Regenerate configs/*.cfg from the calibrated zoo specs.

The checked-in arch files are the CLI-facing form of the zoo; rerun this
after changing a spec so the two stay in sync.
"""

import argparse
from pathlib import Path

from revtrain import zoo
from revtrain.memory_model import parse_arch_file, write_arch_file


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=Path(__file__).resolve().parent.parent / "configs",
                        type=Path)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for name in sorted(zoo.ZOO):
        spec = zoo.get_spec(name)
        path = args.out / f"{name}.cfg"
        write_arch_file(spec, path)
        back = parse_arch_file(path)
        assert back.layers == spec.layers and back.mode == spec.mode, name
        print(f"wrote {path} ({len(spec.layers)} layers, mode {spec.mode})")


if __name__ == "__main__":
    main()
