"""Independent reference computations for the synthetic XOR generator.

With a_ct ~ N(s*d, sigma) and a_pet ~ N(s*(2y-1)*d, sigma), s = +-1 equally
likely, the likelihood ratio for y is cosh(k(a1 + a2)) / cosh(k(a1 - a2))
with k = d / sigma^2, which exceeds 1 exactly when a1 * a2 > 0. So the
Bayes classifier is the product sign, and it is right when both noises
keep their amplitude's sign or both flip it.
"""

import numpy as np
from scipy.stats import norm


def bayes_accuracy(ratio: float) -> float:
    """Accuracy of the product-sign rule for delta / sigma = ``ratio`` (closed form)."""
    p = norm.cdf(ratio)
    return float(p * p + (1 - p) * (1 - p))


def _log_cosh(x):
    x = np.abs(x)
    return x + np.log1p(np.exp(-2 * x)) - np.log(2)


def bayes_auc(ratio: float, n_grid: int = 801, half_width: float = 9.0) -> float:
    """AUC of the Bayes score (log likelihood ratio) by quadrature.

    Rotate to u = (a1 + a2)/sqrt2, v = (a1 - a2)/sqrt2 (unit-sigma units).
    Class 1 puts mean +-sqrt2*ratio on u, class 0 on v; the score is
    logcosh(c u) - logcosh(c v). AUC = P(T1 > T0) + 0.5 P(T1 = T0) is
    evaluated on a dense grid of (u, v) for each class.
    """
    m = np.sqrt(2.0) * ratio
    c = np.sqrt(2.0) * ratio  # k * sqrt2 * sigma in unit-sigma coordinates
    g = np.linspace(-half_width, half_width, n_grid)
    w = np.exp(norm.logpdf(g)) * (g[1] - g[0])
    mix = 0.5 * (np.exp(norm.logpdf(g - m)) + np.exp(norm.logpdf(g + m))) * (g[1] - g[0])
    # class 1: u ~ mixture, v ~ N(0,1); class 0: roles swapped
    lc = _log_cosh(c * g)
    t1 = (lc[:, None] - lc[None, :]).ravel()
    w1 = (mix[:, None] * w[None, :]).ravel()
    t0 = (lc[:, None] - lc[None, :]).ravel()
    w0 = (w[:, None] * mix[None, :]).ravel()
    order = np.argsort(t0, kind="stable")
    t0s, cdf0 = t0[order], np.cumsum(w0[order])
    below = np.searchsorted(t0s, t1, side="left")
    upto = np.searchsorted(t0s, t1, side="right")
    lt = np.where(below > 0, cdf0[np.maximum(below - 1, 0)], 0.0)
    le = np.where(upto > 0, cdf0[np.maximum(upto - 1, 0)], 0.0)
    return float(np.sum(w1 * (lt + 0.5 * (le - lt))) / (w1.sum() * w0.sum()))

