#!/usr/bin/env python3
"""Materialize the two benchmark datasets in their native formats.

The files are extracted from PyPI wheels that redistribute them:

* ``letter-recognition.data`` (UCI "letter", label first) from ``keel-ds``
* ``ml-100k/u.data`` (MovieLens 100k, tab separated) from ``recbole``

Usage: python3 scripts/fetch_data.py [DATA_DIR]
"""
import glob
import os
import subprocess
import sys
import tempfile
import zipfile


def wheel(tmp, name):
    found = glob.glob(os.path.join(tmp, "*.whl"))
    found = [w for w in found if os.path.basename(w).lower().startswith(name)]
    if not found:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--timeout", "200",
             "-q", name, "-d", tmp]
        )
        found = [w for w in glob.glob(os.path.join(tmp, "*.whl"))
                 if os.path.basename(w).lower().startswith(name.replace("-", "_"))]
    return zipfile.ZipFile(found[0])


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "data")
    os.makedirs(os.path.join(out, "ml-100k"), exist_ok=True)
    tmp = os.environ.get("WHEEL_CACHE", tempfile.mkdtemp())

    raw = wheel(tmp, "keel").read("keel_ds/data/balanced/raw/letter.dat").decode()
    with open(os.path.join(out, "letter-recognition.data"), "w") as f:
        for line in raw.splitlines():
            fields = line.strip().split(",")
            if len(fields) != 17:
                continue
            f.write(",".join([fields[-1]] + fields[:-1]) + "\n")

    inter = wheel(tmp, "recbole").read("recbole/dataset_example/ml-100k/ml-100k.inter").decode()
    with open(os.path.join(out, "ml-100k", "u.data"), "w") as f:
        for line in inter.splitlines()[1:]:
            user, item, rating, ts = line.split("\t")
            f.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")


if __name__ == "__main__":
    main()
