"""The ten acceptance criteria, each at its stated tolerance.

Criteria 5 to 8 share the session ``pipeline`` fixture, which runs the
whole synthetic pipeline twice (about a quarter of an hour on one core).
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from mtunet import tensor as T
from mtunet.cli import dispatch
from mtunet.data import Dataset, EvalReport, confidence_interval, evaluate, sample_episode
from mtunet.io import load_checkpoint
from mtunet.matcher import PairMatcher, average_supports, classify_query, episode_loss, match_score, score_matrix
from mtunet.model import MTUNet
from mtunet.nn import GRUCell, gru_cell
from mtunet.pattern import PatternExtractor, extract_overall, modulate, pe_forward
from mtunet.rng import Pcg32
from mtunet.tensor import Tensor
from mtunet.training import scouter_loss

from conftest import gradient_error, randomize
from oracles import GRAD_TOL, PCG32_42_54, sample_std_ci

INSTANCES = 20


def _leaf(gen, *shape, positive=False):
    data = gen.random(shape) + 0.1 if positive else gen.normal(size=shape)
    return Tensor(data, requires_grad=True)


def _weighted(out, gen):
    """Scalar probe that exercises the whole Jacobian of ``out``."""
    weights = gen.normal(size=out.shape)
    return T.tsum(T.hadamard(out, weights))


def _case_matmul(gen):
    a, b = _leaf(gen, 3, 4), _leaf(gen, 4, 2)
    w = gen.normal(size=(3, 2))
    return lambda: T.tsum(T.hadamard(T.matmul(a, b), w)), [a, b]


def _case_elementwise(gen):
    a, b = _leaf(gen, 2, 5), _leaf(gen, 2, 5)
    w = [gen.normal(size=(2, 5)) for _ in range(6)]
    factor = gen.normal()

    def loss():
        parts = [T.elementwise("relu", a), T.elementwise("sigmoid", a), T.elementwise("tanh", b),
                 T.elementwise("hadamard", a, b), T.elementwise("add", a, b), T.elementwise("scale", b, factor)]
        return sum((T.tsum(T.hadamard(p, wi)) for p, wi in zip(parts, w)), Tensor(0.0))

    return loss, [a, b]


def _case_softmax(gen):
    x = _leaf(gen, 3, 5)
    w = gen.normal(size=(3, 5))
    return lambda: T.tsum(T.hadamard(T.softmax_rows(x), w)), [x]


def _case_conv(gen):
    x, k, bias = _leaf(gen, 2, 5, 5), _leaf(gen, 3, 2, 3, 3), _leaf(gen, 3)
    stride, pad = int(gen.integers(1, 3)), int(gen.integers(0, 2))
    w = gen.normal(size=T.conv2d(x, k, bias, stride, pad).shape)
    return lambda: T.tsum(T.hadamard(T.conv2d(x, k, bias, stride, pad), w)), [x, k, bias]


def _case_pool(gen):
    x = _leaf(gen, 2, 4, 6)
    window, stride = [(2, 2), (2, 1), (3, 1)][int(gen.integers(0, 3))]
    w = gen.normal(size=T.pool2d("avg", x, window, stride).shape)
    return lambda: T.tsum(T.hadamard(T.pool2d("avg", x, window, stride), w)), [x]


def _case_gru(gen):
    cell = randomize(GRUCell(4, Pcg32(1)), gen)
    x, h = _leaf(gen, 3, 4), _leaf(gen, 3, 4)
    w = gen.normal(size=(3, 4))
    return lambda: T.tsum(T.hadamard(gru_cell(x, h, cell), w)), [x, h] + cell.parameters()


def _case_modulate(gen):
    raw = Tensor(gen.normal(size=(3, 6)) * 2, requires_grad=True)
    w = gen.normal(size=(3, 6))
    return lambda: T.tsum(T.hadamard(modulate(raw), w)), [raw]


def _case_overall(gen):
    feats, attn = _leaf(gen, 4, 2, 3), _leaf(gen, 2, 6, positive=True)
    w = gen.normal(size=4)
    return lambda: T.tsum(T.hadamard(extract_overall(feats, attn), w)), [feats, attn]


def _case_match(gen):
    pm = randomize(PairMatcher(4, Pcg32(1), input_scale=float(gen.uniform(0.5, 3))), gen)
    q, s = _leaf(gen, 4), _leaf(gen, 4)
    return lambda: match_score(q, s, pm), [q, s] + pm.parameters()


def _case_episode_loss(gen):
    scores = Tensor(gen.uniform(0.05, 0.95, size=(6, 3)), requires_grad=True)
    labels = gen.integers(0, 3, size=6)
    kind = ["bce", "softmax_ce"][int(gen.integers(0, 2))]
    return lambda: episode_loss(scores, labels, kind), [scores]


def _case_scouter(gen):
    attn = Tensor(gen.uniform(0.01, 0.3, size=(2, 3, 6)), requires_grad=True)
    labels = gen.integers(0, 3, size=2)
    lam, norm = float(gen.uniform(0.1, 2)), ["zl", "l"][int(gen.integers(0, 2))]
    return lambda: scouter_loss(attn, labels, lam, 1.0, norm), [attn]


def _case_pe_forward(gen):
    # z=2, d=4, l=6 (2×3 map), T=3
    pe = randomize(PatternExtractor(3, 2, Pcg32(1), dim=4, iterations=3), gen)
    feats = Tensor(gen.random((3, 2, 3)), requires_grad=True)
    wv, wa = gen.normal(size=3), gen.normal(size=(2, 6))

    def loss():
        v, attn = pe_forward(feats, pe)
        return T.tsum(T.hadamard(v, wv)) + T.tsum(T.hadamard(attn, wa))

    return loss, [feats] + pe.parameters()


GRADIENT_CASES = {
    "matmul": _case_matmul,
    "elementwise": _case_elementwise,
    "softmax_rows": _case_softmax,
    "conv2d": _case_conv,
    "pool2d_avg": _case_pool,
    "gru_cell": _case_gru,
    "modulate": _case_modulate,
    "extract_overall": _case_overall,
    "match_score": _case_match,
    "episode_loss": _case_episode_loss,
    "scouter_loss": _case_scouter,
    "pe_forward": _case_pe_forward,
}


def test_criterion_01_gradient_suite():
    gen = np.random.default_rng(20240101)
    start = time.perf_counter()
    worst = {}
    for name, build in GRADIENT_CASES.items():
        worst[name] = max(gradient_error(*build(gen)) for _ in range(INSTANCES))
    elapsed = time.perf_counter() - start
    print(f"gradient suite: {elapsed:.1f}s, worst relative error per op:",
          {k: f"{v:.1e}" for k, v in worst.items()})
    assert all(err <= GRAD_TOL for err in worst.values()), worst
    assert elapsed < 30.0


def test_criterion_02_modulation_invariants():
    gen = np.random.default_rng(2)
    for _ in range(1000):
        z, l = int(gen.integers(1, 7)), int(gen.integers(1, 21))
        raw = gen.normal(size=(z, l)) * gen.uniform(0.1, 5.0)
        a = modulate(raw).data
        sig = 1 / (1 + np.exp(-raw))
        soft = np.exp(raw - raw.max(axis=1, keepdims=True))
        soft /= soft.sum(axis=1, keepdims=True)
        assert np.all((a > 0) & (a < 1))
        assert np.all(a.sum(axis=1) < 1)
        assert np.all(a <= sig) and np.all(a <= soft)
    exact = modulate([[0.0, math.log(3)]]).data
    assert np.max(np.abs(exact - [[0.125, 0.5625]])) <= 1e-12


def test_criterion_03_episodic_protocol():
    per, n_cat = 30, 12
    ds = Dataset.from_arrays([np.zeros((3, 1, 1))] * (per * n_cat),
                             [f"c{i // per}" for i in range(per * n_cat)], ["test"] * (per * n_cat))
    rng = Pcg32(3, 9)
    start = time.perf_counter()
    episodes = [sample_episode(ds, "test", 5, 1, 15, rng) for _ in range(10000)]
    for ep in episodes:
        assert len(ep.support) == 5 and len(ep.query) == 75
        assert not set(ep.support_ids) & set(ep.query_ids)
        assert len(set(ep.support_ids)) == 5 and len(set(ep.query_ids)) == 75
        assert np.bincount([y for _, y in ep.support], minlength=5).tolist() == [1] * 5
        assert np.bincount(ep.query_labels, minlength=5).tolist() == [15] * 5
        assert all(ds.label_of(i) == ep.categories[y] for i, y in ep.support + ep.query)
    elapsed = time.perf_counter() - start
    print(f"10000 episodes sampled and checked in {elapsed:.2f}s")
    assert elapsed < 10.0


class _RandomGuesser:
    def __init__(self, seed):
        self.gen = np.random.default_rng(seed)

    def embed(self, images):
        return np.zeros((len(images), 1))

    def classify(self, queries, supports):
        return self.gen.integers(0, len(supports), size=len(queries))


def test_criterion_04_ci_oracle():
    gen = np.random.default_rng(4)
    for _ in range(100):
        n = int(gen.integers(2, 300))
        acc = gen.integers(0, 76, size=n) / 75
        assert abs(confidence_interval(acc) - sample_std_ci(list(acc))) <= 1e-12
    per = 20
    ds = Dataset.from_arrays([np.zeros((3, 1, 1))] * (per * 5), [f"c{i // per}" for i in range(per * 5)],
                             ["val"] * (per * 5))
    report = evaluate(_RandomGuesser(0), ds, "val", 40, 5, 1, 15, base_seed=3)
    assert isinstance(report, EvalReport) and report.episodes == 40
    assert abs(report.ci - sample_std_ci(report.accuracies)) <= 1e-12


def _eval_result(path):
    return json.loads(path.read_text(encoding="utf-8"))


@pytest.mark.slow
def test_criterion_05_end_to_end(pipeline):
    first = pipeline[0]
    one, five = _eval_result(first["eval1"]), _eval_result(first["eval5"])
    print(f"pipeline wall time {first['wall']:.0f}s; 1-shot {one['mean']:.4f} ± {one['ci']:.4f}; "
          f"5-shot {five['mean']:.4f} ± {five['ci']:.4f}")
    assert one["episodes"] == 500 and one["way"] == 5 and one["shot"] == 1
    assert one["mean"] >= 0.45
    assert five["mean"] >= one["mean"]
    assert first["wall"] < 15 * 60


def _artifact_bytes(run):
    files = {name: run[name].read_bytes() for name in ("backbone", "pe", "full", "eval1", "eval5")}
    for path in sorted(run["explain"].iterdir()):
        if path.suffix in (".ppm", ".csv"):
            files[f"explain/{path.name}"] = path.read_bytes()
    return files


@pytest.mark.slow
def test_criterion_06_determinism(pipeline):
    first, second = (_artifact_bytes(run) for run in pipeline)
    assert sorted(first) == sorted(second)
    differing = [name for name in first if first[name] != second[name]]
    assert not differing, differing
    assert sum(name.startswith("explain/") for name in first) > 1


def _diff(a, b):
    return {k for k in set(a) | set(b) if k not in a or k not in b or a[k].tobytes() != b[k].tobytes()}


@pytest.mark.slow
def test_criterion_07_stage_freezing(pipeline):
    run = pipeline[0]
    backbone, pe, full = (load_checkpoint(run[k]) for k in ("backbone", "pe", "full"))
    after_pe, after_pm = _diff(backbone, pe), _diff(pe, full)
    assert after_pe and all(k.startswith("pe.") for k in after_pe)
    assert after_pm and all(k.startswith("pm.") for k in after_pm)


@pytest.mark.slow
def test_criterion_08_explanation_exports(pipeline, tmp_path):
    run = pipeline[0]
    model = MTUNet.load(run["full"])
    way, z = 5, model.pe.slots
    out = run["explain"]
    assert len(list(out.glob("support_*.ppm"))) == way * (z + 1)
    assert len(list(out.glob("query_*.ppm"))) == way * (z + 1)
    rows = list(csv.reader(open(out / "matrix.csv", encoding="utf-8")))
    values = [float(v) for row in rows[1:] for v in row[1:]]
    assert len(rows) == way + 1 and all(len(r) == way + 1 for r in rows)
    assert len(values) == way * way and all(0.0 <= v <= 100.0 for v in values)

    for p in model.pm.parameters():
        p.data[:] = 0.0
    model.save(tmp_path / "zero.mtck")
    code = dispatch(["explain", "--data", str(run["data"]), "--model", str(tmp_path / "zero.mtck"),
                     "--way", "5", "--shot", "1", "--out", str(tmp_path / "zero"), "--seed", "1"])
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "zero" / "matrix.csv", encoding="utf-8")))
    assert [float(v) for row in rows[1:] for v in row[1:]] == [50.0] * (way * way)


def test_criterion_09_pcg32_conformance():
    rng = Pcg32(42, 54)
    assert [rng.next_u32() for _ in range(10)] == PCG32_42_54


def test_criterion_10_pattern_permutation():
    gen = np.random.default_rng(10)
    for _ in range(50):
        c, z, d = int(gen.integers(2, 6)), int(gen.integers(2, 6)), int(gen.integers(2, 7))
        h, w = int(gen.integers(1, 4)), int(gen.integers(1, 4))
        pe = randomize(PatternExtractor(c, z, Pcg32(1), dim=d, iterations=int(gen.integers(1, 4))), gen)
        pm = randomize(PairMatcher(c, Pcg32(2)), gen)
        feats = gen.random((8, c, h, w))
        perm = gen.permutation(z)
        v, attn = pe_forward(feats, pe)
        pe.patterns.data = pe.patterns.data[perm]
        v_perm, attn_perm = pe_forward(feats, pe)
        assert np.allclose(v_perm.data, v.data, rtol=0, atol=1e-12)
        assert np.allclose(attn_perm.data, attn.data[:, perm], rtol=0, atol=1e-12)
        supports = average_supports(v.data[:4].reshape(2, 2, c)).data
        before = classify_query(score_matrix(v.data[4:], supports, pm).data)
        supports_perm = average_supports(v_perm.data[:4].reshape(2, 2, c)).data
        after = classify_query(score_matrix(v_perm.data[4:], supports_perm, pm).data)
        assert np.array_equal(before, after)
