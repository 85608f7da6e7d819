#!/usr/bin/env python3
"""Build a training corpus: a random sample of MS-COCO images, resized so the
short side is at least the crop size.

    python scripts/fetch_corpus.py data/ --count 200

Downloads val2017 (about 800 MB) unless --zip points at a local copy.
Needs Pillow.
"""
import argparse
import io
import random
import urllib.request
import zipfile
from pathlib import Path

from PIL import Image

URL = "http://images.cocodataset.org/zips/val2017.zip"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--min-side", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--zip", type=Path, help="local copy of val2017.zip")
    args = ap.parse_args()

    path = args.zip
    if path is None:
        path = args.out.parent / "val2017.zip"
        if not path.exists():
            print(f"downloading {URL}")
            urllib.request.urlretrieve(URL, path)

    args.out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path) as z:
        names = sorted(n for n in z.namelist() if n.endswith(".jpg"))
        random.Random(args.seed).shuffle(names)
        written = 0
        for name in names:
            if written == args.count:
                break
            img = Image.open(io.BytesIO(z.read(name))).convert("RGB")
            s = args.min_side / min(img.size)
            if s > 1:
                img = img.resize((round(img.width * s), round(img.height * s)), Image.BICUBIC)
            img.save(args.out / Path(name).name, quality=95)
            written += 1
    print(f"wrote {written} images to {args.out}")


if __name__ == "__main__":
    main()
