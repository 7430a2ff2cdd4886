#!/usr/bin/env python3
"""Fetch MovieLens-100K and convert it to the plain formats `nam` reads.

The GroupLens site is the canonical source. When it is unreachable, the copy
bundled in the `pytorch-widedeep` wheel on PyPI is used instead.

Writes into the target directory (default: data/ml-100k):
  ratings.csv     userId,movieId,rating,timestamp (with header)
  metadata.tsv    item_id<TAB>genres<TAB>year (genres pipe-separated)

The MovieLens license does not allow redistribution, so the files are
generated locally and are git-ignored.
"""
import argparse
import io
import os
import sys
import urllib.request
import zipfile

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL = (
    "https://pypi.org/packages/a0/ea/88e43dd9bc3decb52c148e0c8ce96274bdd872d791d3697b18ce802ef793/"
    "pytorch_widedeep-1.7.0-py3-none-any.whl"
)
GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def fetch(url):
    with urllib.request.urlopen(url, timeout=60) as r:
        return r.read()


def year_of(date):
    if not isinstance(date, str) or len(date) < 4:
        return ""
    return date[-4:]


def from_grouplens(blob):
    z = zipfile.ZipFile(io.BytesIO(blob))
    ratings = []
    for line in z.read("ml-100k/u.data").decode().splitlines():
        u, i, r, t = line.split("\t")
        ratings.append((u, i, r, t))
    items = []
    for line in z.read("ml-100k/u.item").decode("latin-1").splitlines():
        f = line.split("|")
        flags = f[5:]
        genres = [g for g, v in zip(GENRES, flags) if v == "1"]
        items.append((f[0], genres, year_of(f[2])))
    return ratings, items


def from_wheel(blob):
    import pandas as pd

    z = zipfile.ZipFile(io.BytesIO(blob))
    base = "pytorch_widedeep/datasets/data/MovieLens100k_"
    data = pd.read_parquet(io.BytesIO(z.read(base + "data.parquet.brotli")))
    meta = pd.read_parquet(io.BytesIO(z.read(base + "items.parquet.brotli")))
    ratings = [
        (str(r.user_id), str(r.movie_id), str(r.rating), str(r.timestamp))
        for r in data.itertuples(index=False)
    ]
    items = []
    for _, row in meta.iterrows():
        genres = [g for g in GENRES if int(row[g]) == 1]
        items.append((str(row["movie_id"]), genres, year_of(row["release_date"])))
    return ratings, items


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="data/ml-100k")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    try:
        ratings, items = from_grouplens(fetch(GROUPLENS))
    except Exception as e:  # noqa: BLE001
        print(f"grouplens unavailable ({e}); using the PyPI copy", file=sys.stderr)
        ratings, items = from_wheel(fetch(WHEEL))
    with open(os.path.join(args.out, "ratings.csv"), "w") as f:
        f.write("userId,movieId,rating,timestamp\n")
        for r in ratings:
            f.write(",".join(r) + "\n")
    with open(os.path.join(args.out, "metadata.tsv"), "w") as f:
        f.write("item_id\tgenres\tyear\n")
        for item, genres, year in items:
            f.write(f"{item}\t{'|'.join(genres)}\t{year}\n")
    print(f"wrote {len(ratings)} ratings and {len(items)} items to {args.out}")


if __name__ == "__main__":
    main()
