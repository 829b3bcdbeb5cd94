"""Fetch MovieLens-100K ratings into data/ml-100k/u.data.

Tries the GroupLens archive first. When that host is unreachable, falls back
to the copy of the same ratings shipped inside the ``recbole`` wheel (pulled
with ``pip download``), dropping its typed header line.
"""

import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def from_grouplens() -> bytes:
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return archive.read("ml-100k/u.data")


def from_wheel() -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--quiet",
                        "-d", tmp, "recbole==1.2.1"], check=True)
        (wheel,) = Path(tmp).glob("recbole-*.whl")
        text = zipfile.ZipFile(wheel).read(WHEEL_MEMBER).decode("utf-8")
    lines = text.splitlines()
    if lines and ":" in lines[0]:
        lines = lines[1:]
    return ("\n".join(lines) + "\n").encode("utf-8")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/ml-100k/u.data")
    args = parser.parse_args()
    out = Path(args.out)
    try:
        data = from_grouplens()
        source = "grouplens"
    except OSError as exc:
        print(f"grouplens unavailable ({exc}); using the recbole wheel", file=sys.stderr)
        data = from_wheel()
        source = "recbole wheel"
    n = data.count(b"\n")
    if n != 100_000:
        print(f"expected 100000 ratings, got {n}", file=sys.stderr)
        return 1
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(f"wrote {out} ({n} ratings, from {source})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
