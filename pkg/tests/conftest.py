import numpy as np
import pytest
from PIL import Image


def _png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


@pytest.fixture
def busi_root(tmp_path):
    """Miniature BUSI tree: 6 benign, 3 malignant, 2 normal, one two-mask stem and one orphan."""
    rng = np.random.default_rng(0)
    root = tmp_path / "busi"

    def add(cat, stem, masks):
        _png(root / cat / f"{stem}.png", rng.integers(0, 256, (40, 50), dtype=np.uint8))
        for suffix, box in masks:
            m = np.zeros((40, 50), np.uint8)
            y0, y1, x0, x1 = box
            m[y0:y1, x0:x1] = 255
            _png(root / cat / f"{stem}{suffix}.png", m)

    for i in range(6):
        add("benign", f"benign ({i + 1})", [("_mask", (5, 15, 5, 20))])
    add("benign", "benign (7)", [("_mask", (5, 15, 5, 20)), ("_mask_1", (20, 30, 25, 40))])
    for i in range(3):
        add("malignant", f"malignant ({i + 1})", [("_mask", (10, 30, 10, 30))])
    for i in range(2):
        add("normal", f"normal ({i + 1})", [("_mask", (0, 0, 0, 0))])
    add("malignant", "malignant (9)", [])  # missing mask
    return root
