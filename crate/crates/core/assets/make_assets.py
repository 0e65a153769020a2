"""Regenerates the bundled test images from scikit-image's sample data.

Usage: python3 make_assets.py  (writes into the directory containing this file)
"""
import os

import numpy as np
from PIL import Image
from skimage import data

HERE = os.path.dirname(os.path.abspath(__file__))

CORPUS = ["astronaut", "camera", "coffee", "chelsea", "brick",
          "grass", "gravel", "coins", "moon", "rocket"]
FIT = ["astronaut", "chelsea", "coffee"]


def square(img):
    h, w = img.shape[:2]
    s = min(h, w)
    y0, x0 = (h - s) // 2, (w - s) // 2
    return img[y0:y0 + s, x0:x0 + s]


def resized(name, size):
    img = square(getattr(data, name)())
    mode = "RGB" if img.ndim == 3 else "L"
    return Image.fromarray(np.asarray(img, dtype=np.uint8), mode).resize(
        (size, size), Image.BOX)


def main():
    for name in CORPUS:
        resized(name, 128).save(os.path.join(HERE, "corpus", f"{name}.png"))
    for name in FIT:
        resized(name, 32).save(os.path.join(HERE, "fit", f"{name}_32.png"))
        resized(name, 64).save(os.path.join(HERE, "fit", f"{name}_64.png"))
    resized("chelsea", 256).save(os.path.join(HERE, "fit", "chelsea_256.png"))


if __name__ == "__main__":
    main()
