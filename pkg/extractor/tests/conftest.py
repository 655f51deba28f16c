import subprocess
import sys

import numpy as np
import pytest
from PIL import Image


def run_engine_validate(*paths):
    """Invoke the retrieval engine's validator CLI (the format oracle)."""
    return subprocess.run(
        [sys.executable, "-m", "fusecap.cli", "validate", *map(str, paths)],
        capture_output=True, text=True,
    )


def solid_image(rgb, size=(32, 32)):
    return Image.new("RGB", size, rgb)


def striped_image(size=(32, 32), stripe=1):
    arr = np.zeros((size[1], size[0], 3), dtype=np.uint8)
    for x in range(size[0]):
        if (x // stripe) % 2 == 0:
            arr[:, x, :] = 255
    return Image.fromarray(arr)


def noise_image(rng, size=(32, 32)):
    arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    return Image.fromarray(np.asarray(arr, dtype=np.uint8))


@pytest.fixture
def image_dir(tmp_path):
    """Ten decodable sample images with lexicographically unsorted names."""
    rng = np.random.default_rng(11)
    directory = tmp_path / "images"
    directory.mkdir()
    names = ["i09", "i03", "i00", "i07", "i01", "i05", "i02", "i08", "i04", "i06"]
    for i, name in enumerate(names):
        if i % 3 == 0:
            img = solid_image((20 * i, 255 - 20 * i, 40))
        elif i % 3 == 1:
            img = striped_image(stripe=1 + i % 4)
        else:
            img = noise_image(rng)
        img.save(directory / f"{name}.png")
    return directory
