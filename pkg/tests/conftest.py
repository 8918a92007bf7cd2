import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# skimage sample images bundled with the package (no download needed)
CORPUS_NAMES = [
    "astronaut", "brick", "camera", "cat", "cell", "chelsea", "clock", "coffee", "coins", "colorwheel",
    "grass", "gravel", "horse", "hubble_deep_field", "immunohistochemistry", "moon", "retina", "rocket",
    "shepp_logan_phantom", "checkerboard",
]


def corpus_images(names=CORPUS_NAMES):
    import skimage.color
    import skimage.data

    out = []
    for n in names:
        im = getattr(skimage.data, n)()
        if im.ndim == 3:
            im = skimage.color.rgb2gray(im[..., :3])
        im = im.astype(np.float64)
        out.append((n, (im - im.min()) / (im.max() - im.min())))
    return out


def write_corpus(root: Path, names=CORPUS_NAMES) -> Path:
    from selfkp.io import save_image

    root.mkdir(parents=True, exist_ok=True)
    for n, im in corpus_images(names):
        save_image(root / f"{n}.png", im)
    return root


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("small_corpus"), CORPUS_NAMES[:4])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def criterion(request):
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
