"""Reference computations that never touch the code paths they check."""

import numpy as np

FD_STEP = 1e-6
GRAD_TOL = 1e-5

# first ten outputs of the reference pcg32 demo, seed 42 / stream 54
PCG32_42_54 = [
    0xA15C02B7, 0x7B47F409, 0xBA1D3330, 0x83D2F293, 0xBFA4784B,
    0xCBED606E, 0xBFC6A3AD, 0x812FFF6D, 0xE61F305A, 0xF9384B90,
]


def central_difference(f, array, step=FD_STEP):
    """d f / d array by central differences; ``f`` reads ``array`` in place."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        old = array[idx]
        array[idx] = old + step
        up = f()
        array[idx] = old - step
        down = f()
        array[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def pcg32_oracle(seed, stream, count):
    """Reference generator on numpy uint64 with explicit wraparound."""
    mask32 = 0xFFFFFFFF
    mult = np.uint64(6364136223846793005)
    inc = np.uint64(((stream << 1) | 1) & 0xFFFFFFFFFFFFFFFF)

    def step(state):
        with np.errstate(over="ignore"):
            new = state * mult + inc
        xorshifted = int((((state >> np.uint64(18)) ^ state) >> np.uint64(27))) & mask32
        rot = int(state >> np.uint64(59))
        return new, ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & mask32

    state, _ = step(np.uint64(0))
    with np.errstate(over="ignore"):
        state = state + np.uint64(seed)
    state, _ = step(state)
    out = []
    for _ in range(count):
        state, value = step(state)
        out.append(value)
    return out


def sample_std_ci(values):
    """1.96 · s / sqrt(n) written out longhand."""
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return 1.96 * var ** 0.5 / n ** 0.5
