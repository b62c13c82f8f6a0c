"""Build the 1 MiB natural-text corpus used by the ablation acceptance test.

The text is public-domain Project Gutenberg Shakespeare, taken from the
``shakespeare`` sdist on PyPI::

    pip download --no-deps shakespeare==0.6 && tar xzf shakespeare-0.6.tar.gz
    python scripts/make_ablation_corpus.py shakespeare-0.6/shksprdata/texts tests/data/shakespeare_1mb.txt

Plays are concatenated in filename order (modern-spelling ``*_gut.txt``
editions only) and the result is cut at exactly 1,048,576 bytes.
"""

import sys
from pathlib import Path

SIZE = 1 << 20


def main(src: str, dst: str) -> None:
    files = sorted(p for p in Path(src).glob("*_gut.txt"))
    out = bytearray()
    for p in files:
        out += p.read_bytes()
        if len(out) >= SIZE:
            break
    if len(out) < SIZE:
        sys.exit(f"only {len(out)} bytes available")
    Path(dst).write_bytes(bytes(out[:SIZE]))


if __name__ == "__main__":
    main(*sys.argv[1:3])
