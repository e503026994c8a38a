"""Fetch MovieLens-100K into ``<dest>/ml-100k/{u.data,u.user}``.

Tries the GroupLens archive first.  Where that host is unreachable, falls
back to the copy shipped inside the ``pytorch-widedeep`` wheel (the same
100,000 ratings and 943 user profiles, stored as parquet), fetched with
``pip download`` and converted to the original tab / pipe layouts.
Requires pandas and pyarrow for the fallback.

Usage: python scripts/fetch_ml100k.py [dest]   (default: ./data)
"""

import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL = "pytorch-widedeep==1.7.0"
PREFIX = "pytorch_widedeep/datasets/data/MovieLens100k_"


def from_grouplens(out: Path) -> bool:
    try:
        blob = urllib.request.urlopen(GROUPLENS, timeout=20).read()
    except OSError as exc:
        print(f"grouplens unavailable: {exc}")
        return False
    with zipfile.ZipFile(io.BytesIO(blob)) as z:
        for name in ("u.data", "u.user"):
            (out / name).write_bytes(z.read(f"ml-100k/{name}"))
    return True


def from_wheel(out: Path) -> None:
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", WHEEL, "--no-deps", "-d", tmp], check=True)
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as z:
            ratings = pd.read_parquet(io.BytesIO(z.read(PREFIX + "data.parquet.brotli")))
            users = pd.read_parquet(io.BytesIO(z.read(PREFIX + "users.parquet.brotli")))
    cols = ["user_id", "movie_id", "rating", "timestamp"]
    ratings[cols].to_csv(out / "u.data", sep="\t", header=False, index=False)
    ucols = ["user_id", "age", "gender", "occupation", "zip_code"]
    users[ucols].to_csv(out / "u.user", sep="|", header=False, index=False)


def main() -> None:
    dest = Path(sys.argv[1] if len(sys.argv) > 1 else "data") / "ml-100k"
    dest.mkdir(parents=True, exist_ok=True)
    if not from_grouplens(dest):
        from_wheel(dest)
    n = sum(1 for _ in open(dest / "u.data"))
    print(f"wrote {dest} ({n} ratings)")


if __name__ == "__main__":
    main()
