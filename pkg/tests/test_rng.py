from collections import Counter

import pytest

from mtunet.rng import Pcg32, mix_seed, splitmix64

from oracles import PCG32_42_54, pcg32_oracle


def test_reference_vector():
    rng = Pcg32(42, 54)
    assert [rng.next_u32() for _ in range(10)] == PCG32_42_54


@pytest.mark.parametrize("seed,stream", [(0, 0), (1, 1013), (2 ** 64 - 1, 7), (123456789, 2 ** 63 + 5)])
def test_matches_independent_oracle(seed, stream):
    rng = Pcg32(seed, stream)
    assert [rng.next_u32() for _ in range(50)] == pcg32_oracle(seed, stream, 50)


def test_same_seed_same_sequence():
    a, b = Pcg32(9, 3), Pcg32(9, 3)
    assert [a.next_u32() for _ in range(1000)] == [b.next_u32() for _ in range(1000)]
    assert Pcg32(9, 3).next_u32() != Pcg32(9, 4).next_u32()


def test_next_below_one_is_zero():
    rng = Pcg32(5)
    assert all(rng.next_below(1) == 0 for _ in range(200))


def test_next_below_is_roughly_uniform():
    rng = Pcg32(11)
    counts = Counter(rng.next_below(6) for _ in range(60000))
    chi2 = sum((c - 10000) ** 2 / 10000 for c in counts.values())
    assert set(counts) == set(range(6))
    assert chi2 < 20.5  # p ≈ 0.001 for 5 degrees of freedom


def test_next_float_range():
    rng = Pcg32(3)
    values = [rng.next_float() for _ in range(5000)]
    assert min(values) >= 0.0 and max(values) < 1.0


def test_sample_and_shuffle():
    rng = Pcg32(8)
    picked = rng.sample(range(10), 4)
    assert len(set(picked)) == 4 and all(0 <= p < 10 for p in picked)
    assert sorted(rng.shuffle(list(range(20)))) == list(range(20))
    with pytest.raises(ValueError):
        rng.sample(range(3), 4)


def test_splitmix_reference():
    # first output of the public SplitMix64 reference for state 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert mix_seed(5, 3) == splitmix64(6)
