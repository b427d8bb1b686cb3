"""Shared test fixtures that are plain functions (no pytest magic)."""
import numpy as np

from parapot.adaptree import build_adaptive

# criterion lines collected by the acceptance tests, printed at session end
RESULTS: list[str] = []


def band_limited(seed, p=1, nmax=6, zero_mean=False):
    """Random real trigonometric polynomial with |n_i| <= nmax, as f(x, y) -> (p, ...)."""
    rng = np.random.default_rng(seed)
    modes = [(a, b) for a in range(-nmax, nmax + 1) for b in range(0, nmax + 1) if (b > 0 or a >= 0)]
    coef = rng.standard_normal((p, len(modes), 2)) / (1 + np.array([a * a + b * b for a, b in modes]))[None, :, None]
    if zero_mean:
        coef[:, modes.index((0, 0)), :] = 0.0

    def f(x, y):
        x = np.asarray(x, float)
        out = np.zeros((p,) + x.shape)
        for m, (a, b) in enumerate(modes):
            ph = 2 * np.pi * (a * x + b * y)
            out += coef[:, m, 0].reshape((p,) + (1,) * x.ndim) * np.cos(ph)
            if (a, b) != (0, 0):
                out += coef[:, m, 1].reshape((p,) + (1,) * x.ndim) * np.sin(ph)
        return out

    return f


def random_field(seed, eps=1e-9, nbumps=3):
    rng = np.random.default_rng(seed)
    cs = rng.uniform(-0.5, 0.5, (nbumps, 2))
    ws = rng.uniform(2e-3, 2e-2, nbumps)
    amps = rng.uniform(-1, 1, nbumps)

    def f(x, y):
        out = 0.3 * np.sin(2 * np.pi * x + 1.0) * np.cos(2 * np.pi * y)
        for (cx, cy), w, a in zip(cs, ws, amps):
            dx = np.mod(x - cx + 0.5, 1.0) - 0.5
            dy = np.mod(y - cy + 0.5, 1.0) - 0.5
            out = out + a * np.exp(-(dx**2 + dy**2) / w)
        return out

    return build_adaptive(f, eps), f
