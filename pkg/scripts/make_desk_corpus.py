"""Write a small natural-image corpus (train/heldout) from scikit-image's bundled samples."""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data

TRAIN = [
    "astronaut", "rocket", "immunohistochemistry", "hubble_deep_field", "retina",
    "camera", "coins", "moon", "brick", "grass", "gravel", "colorwheel",
]
HELDOUT = ["coffee", "chelsea"]


def _rgb(a):
    a = np.asarray(a)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.ndim == 2:
        a = np.stack([a] * 3, axis=-1)
    return a[..., :3].astype(np.uint8)


def _motorcycle(side):
    path = Path(data.__file__).parent / f"motorcycle_{side}.png"
    return np.asarray(Image.open(path).convert("RGB"))


def write_corpus(root):
    root = Path(root)
    for split, names in (("train", TRAIN), ("heldout", HELDOUT)):
        out = root / split
        out.mkdir(parents=True, exist_ok=True)
        for name in names:
            Image.fromarray(_rgb(getattr(data, name)())).save(out / f"{name}.png")
    Image.fromarray(_motorcycle("left")).save(root / "train" / "motorcycle_left.png")
    Image.fromarray(_motorcycle("right")).save(root / "heldout" / "motorcycle_right.png")
    return root / "train", root / "heldout"


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out", type=Path)
    args = p.parse_args()
    train, held = write_corpus(args.out)
    print(f"train: {train}\nheldout: {held}")
