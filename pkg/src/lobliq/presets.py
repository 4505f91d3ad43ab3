"""Ready-made parameter sets.

The rates are YHOO estimates for the week of 2016-04-11 in unit size
``S_l = 209`` shares.  The empirical post-move volume histograms are not
public, so :func:`stylised_volume_dist` supplies a stand-in with the same
qualitative shape: the queue at the newly formed best level is thin, the
queue on the other side keeps a typical depth.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import nbinom

from .model import ModelParams

# (mu, kappa, theta) per (side, direction)
YHOO_RATES = {
    0: {
        ("ask", 1): (0.14, 1.97, 0.26),
        ("bid", 1): (0.17, 3.54, 0.32),
        ("ask", -1): (0.15, 3.29, 0.33),
        ("bid", -1): (0.15, 1.92, 0.21),
    },
    1: {
        ("ask", 1): (0.13, 1.87, 0.23),
        ("bid", 1): (0.16, 2.07, 0.26),
        ("ask", -1): (0.14, 2.02, 0.27),
        ("bid", -1): (0.15, 1.83, 0.18),
    },
}

YHOO_UNIT_SIZES = (209.0, 334.0, 201.0)


def _pmf(mean: float, n_disp: float, N: int) -> np.ndarray:
    # negative binomial shifted to start at 1
    p = n_disp / (n_disp + mean - 1.0)
    return nbinom.pmf(np.arange(N), n_disp, p)


def stylised_volume_dist(N: int = 25, thin_mean: float = 2.0, thick_mean: float = 8.0,
                         dispersion: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """``(f_up, f_down)`` with independent thin/thick marginals, truncated to ``N``."""
    thin = _pmf(thin_mean, dispersion, N)
    thick = _pmf(thick_mean, dispersion, N)
    up = np.outer(thin, thick)  # thin bid after an up-move
    up /= up.sum()
    return up, up.T.copy()


def yhoo_params(latency_ms: int = 0, N: int = 25, rho: float = 1.0, v_bar: int = 9,
                vol_dist: tuple[np.ndarray, np.ndarray] | None = None) -> ModelParams:
    if latency_ms not in YHOO_RATES:
        raise ValueError("latency_ms must be 0 or 1")
    rates = YHOO_RATES[latency_ms]
    mu = np.zeros((2, 2))
    kappa = np.zeros((2, 2))
    theta = np.zeros((2, 2))
    for (side, j), (m, k, t) in rates.items():
        s = 0 if side == "ask" else 1
        d = 0 if j == 1 else 1
        mu[s, d], kappa[s, d], theta[s, d] = m, k, t
    up, down = stylised_volume_dist(N) if vol_dist is None else vol_dist
    return ModelParams(mu=mu, kappa=kappa, theta=theta, vol_dist_up=up,
                       vol_dist_down=down, rho=rho, v_bar=v_bar)
