import numpy as np
import pytest

from mtunet import tensor as T
from mtunet.data import Dataset
from mtunet.rng import Pcg32

from oracles import central_difference, relative_error


@pytest.fixture
def rng():
    return Pcg32(2024, 5)


@pytest.fixture
def nprng():
    return np.random.default_rng(7)


def gradient_error(loss_fn, tensors):
    """Worst relative error between backward() and central differences.

    ``loss_fn`` builds a scalar Tensor from the current values of ``tensors``.
    """
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]

    def value():
        with T.no_grad():
            return loss_fn().item()

    worst = 0.0
    for t, g in zip(tensors, analytic):
        worst = max(worst, relative_error(g, central_difference(value, t.data)))
    return worst


def randomize(module, nprng, scale=0.5):
    """Replace every parameter with N(0, scale²) noise (keeps ReLUs off their kink)."""
    for p in module.parameters():
        p.data = nprng.normal(0.0, scale, p.shape)
        p.zero_grad()
    return module


def blob_dataset(n_per=20, size=16, splits=(("base", 3), ("val", 2), ("test", 2)), seed=0):
    """In-memory dataset where category k is a bright square in a fixed quadrant plus noise."""
    gen = np.random.default_rng(seed)
    images, cats, spl = [], [], []
    k = 0
    for split, count in splits:
        for _ in range(count):
            color = np.array([(k * 0.37) % 1, (k * 0.61) % 1, (k * 0.83) % 1])
            for _ in range(n_per):
                im = gen.random((3, size, size)) * 0.3
                r, c = (k % 3) * size // 4, (k // 3 % 3) * size // 4
                im[:, r:r + size // 3, c:c + size // 3] = color[:, None, None] * 0.7 + 0.3
                images.append(np.clip(im, 0, 1))
                cats.append(f"cat{k}")
                spl.append(split)
            k += 1
    return Dataset.from_arrays(images, cats, spl)


@pytest.fixture
def blobs():
    return blob_dataset()


def tiny_model(width=8, slots=2, dim=4, seed=3, zero_matcher=False, n_classes=3):
    """Untrained backbone + extractor + matcher small enough for unit tests."""
    from mtunet.backbone import Backbone
    from mtunet.matcher import PairMatcher
    from mtunet.model import MTUNet
    from mtunet.pattern import PatternExtractor

    rng = Pcg32(seed, 1)
    backbone = Backbone(n_classes, rng, widths=(width,) * 4)
    pe = PatternExtractor(width, slots, rng, dim=dim)
    pm = PairMatcher(width, None if zero_matcher else rng, input_scale=16.0)
    return MTUNet(backbone, pe, pm)


# -- end-to-end pipeline shared by the acceptance suite ----------------------

PIPELINE_SEED = "1"
SCALED_FLAGS = {
    "train-backbone": ["--epochs", "15", "--lr-step", "6", "--val-episodes", "500"],
    "train-pe": ["--epochs", "15", "--lr-step", "10", "--pe-stride", "2"],
    "train-matcher": ["--epochs", "5", "--episodes", "200", "--lr-step", "3", "--val-episodes", "500"],
}


def run_pipeline(root):
    """gen-data, three training stages, 1- and 5-shot eval and one explanation.

    Returns the wall time in seconds and the artifact paths.
    """
    import time

    from mtunet.cli import dispatch

    def run(*argv):
        code = dispatch(list(argv))
        assert code == 0, f"{argv[0]} exited with {code}"

    data, seed = str(root / "data"), ["--seed", PIPELINE_SEED]
    paths = {k: root / f"{k}.mtck" for k in ("backbone", "pe", "full")}
    start = time.perf_counter()
    run("gen-data", "--out", data, "--base", "10", "--val", "5", "--test", "5", "--per-class", "60",
        "--size", "32", *seed)
    run("train-backbone", "--data", data, "--out", str(paths["backbone"]), *seed, *SCALED_FLAGS["train-backbone"])
    run("train-pe", "--data", data, "--model", str(paths["backbone"]), "--out", str(paths["pe"]), *seed,
        *SCALED_FLAGS["train-pe"])
    run("train-matcher", "--data", data, "--model", str(paths["pe"]), "--out", str(paths["full"]), *seed,
        *SCALED_FLAGS["train-matcher"])
    for shot in ("1", "5"):
        paths[f"eval{shot}"] = root / f"eval_{shot}shot.json"
        run("eval", "--data", data, "--model", str(paths["full"]), "--way", "5", "--shot", shot,
            "--query", "15", "--episodes", "500", "--out", str(paths[f"eval{shot}"]), *seed)
    paths["explain"] = root / "explain"
    run("explain", "--data", data, "--model", str(paths["full"]), "--way", "5", "--shot", "1",
        "--out", str(paths["explain"]), *seed)
    wall = time.perf_counter() - start
    paths["data"] = root / "data"
    return wall, paths


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """The full synthetic pipeline, run twice from scratch with the same seed."""
    runs = []
    for name in ("first", "second"):
        wall, paths = run_pipeline(tmp_path_factory.mktemp(f"pipeline_{name}"))
        runs.append({"wall": wall, **paths})
    return runs


# -- one summary line per acceptance criterion -------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        previous = _CRITERIA.get(name)
        if previous is None or previous == "PASS":
            _CRITERIA[name] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        number, _, label = name[len("test_criterion_"):].partition("_")
        terminalreporter.write_line(f"criterion {int(number):2d} {label.replace('_', ' '):<28} {_CRITERIA[name]}")
