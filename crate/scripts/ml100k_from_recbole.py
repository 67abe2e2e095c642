#!/usr/bin/env python3
"""Rebuild the original ML-100K `u.data`, `u.user`, `u.item` files from the
copy of the dataset shipped inside the `recbole` wheel.

Usage: python3 scripts/ml100k_from_recbole.py [OUT_DIR]   (default: data/ml-100k)

The wheel is fetched with `pip download --no-deps recbole` when it is not
already present in the pip cache.
"""
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "recbole/dataset_example/ml-100k/ml-100k"


def fetch_wheel(tmp):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, "recbole==1.2.1"],
        check=True,
    )
    return glob.glob(os.path.join(tmp, "recbole-*.whl"))[0]


def rows(z, suffix):
    text = z.read(f"{PREFIX}.{suffix}").decode("utf-8")
    lines = text.splitlines()
    return [line.split("\t") for line in lines[1:] if line]


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/ml-100k"
    os.makedirs(out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        z = zipfile.ZipFile(fetch_wheel(tmp))
        inter, users, items = rows(z, "inter"), rows(z, "user"), rows(z, "item")

    with open(os.path.join(out, "u.data"), "w") as f:
        for u, i, r, t in inter:
            f.write(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}\n")
    with open(os.path.join(out, "u.user"), "w") as f:
        for u, age, gender, occ, zipc in users:
            f.write(f"{u}|{age}|{gender}|{occ}|{zipc}\n")
    with open(os.path.join(out, "u.item"), "w", encoding="latin-1") as f:
        for row in sorted(items, key=lambda r: int(r[0])):
            iid, title, year = row[0], row[1], row[2]
            classes = row[3].split(" ") if len(row) > 3 and row[3] else []
            flags = "|".join("1" if g in classes else "0" for g in GENRES)
            date = f"01-Jan-{year}" if year else ""
            f.write(f"{iid}|{title}|{date}||http://localhost/{iid}|{flags}\n")
    print(f"wrote {len(inter)} ratings, {len(users)} users, {len(items)} items to {out}")


if __name__ == "__main__":
    main()
