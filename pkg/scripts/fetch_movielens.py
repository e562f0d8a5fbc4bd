"""Download MovieLens-100k ratings to data/ml-100k/u.data.

Tries the GroupLens archive first.  Where that host is unreachable it
falls back to the copy of the same ratings bundled in the ``recbole``
wheel (fetched with ``pip download``, nothing is installed).  Either way
the output is the tab-separated ``user item rating timestamp`` file and
is checked for 100000 ratings over 943 users and 1682 items.
"""
from __future__ import annotations

import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL_SPEC = "recbole==1.2.1"
WHEEL_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def from_grouplens(timeout: float) -> str:
    with urllib.request.urlopen(GROUPLENS_URL, timeout=timeout) as resp:
        data = resp.read()
    with zipfile.ZipFile(io.BytesIO(data)) as z:
        return z.read("ml-100k/u.data").decode()


def from_wheel(timeout: float) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp,
                        WHEEL_SPEC], check=True, timeout=timeout)
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as z:
            lines = z.read(WHEEL_MEMBER).decode().splitlines()
    return "\n".join(lines[1:]) + "\n"  # drop the typed header row


def check(text: str) -> None:
    rows = [ln.split("\t") for ln in text.splitlines() if ln.strip()]
    users = {r[0] for r in rows}
    items = {r[1] for r in rows}
    if (len(rows), len(users), len(items)) != (100_000, 943, 1682):
        raise SystemExit(f"unexpected content: {len(rows)} ratings, {len(users)} users, "
                         f"{len(items)} items")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml-100k/u.data")
    ap.add_argument("--timeout", type=float, default=600.0)
    args = ap.parse_args()
    out = Path(args.out)
    text = None
    for name, fetch in (("grouplens", from_grouplens), ("recbole wheel", from_wheel)):
        try:
            text = fetch(args.timeout)
            print(f"fetched from {name}")
            break
        except Exception as exc:  # noqa: BLE001 - try the next source
            print(f"{name} failed: {exc}", file=sys.stderr)
    if text is None:
        return 1
    check(text)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
