"""Weight functions and integral transforms of the coupled model.

The x-side weights are

    w_j(x) = e^{-n V(x)} m_j(x),   m_j(x) = int y^j e^{-n(y^4/4 - tau x y)} dy,

and the transforms of polynomials are

    Q[q](x) = e^{-n V(x)} int q(y) e^{-n(y^4/4 - tau x y)} dy,
    P[p](y) = e^{-n y^4/4} int p(x) e^{-n(V(x) - tau x y)} dx.

Everything is computed on a log scale: m_j(x) = e^{g(x)} mhat_j(x) with
g(x) = n * (3/4) (tau |x|)^{4/3}, the saddle value of the y-exponent, so
mhat stays inside float range even when e^{g} would overflow.  Only the
three base moments mhat_0, mhat_1, mhat_2 come from quadrature; higher
orders follow from the integration-by-parts recursion

    m_{k+3} = (k m_{k-1} + n tau x m_k) / n,

whose terms are all nonnegative for x >= 0 (no cancellation); x < 0 uses
the parity m_k(-x) = (-1)^k m_k(x).
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .errors import TwomatError
from .quadrature import adaptive_quad

_LOG_CUT = 60.0 * np.log(10.0)  # integrand tail cutoff, ~1e-60 of peak


def _y_cutoff(n, tau, x_abs, g):
    """Y with n(Y^4/4 - tau|x|Y) - g >= _LOG_CUT, by upward fixed point."""
    target = (g + _LOG_CUT) / n
    y = max(1.0, (4.0 * target) ** 0.25, 2.0 * (tau * x_abs) ** (1.0 / 3.0))
    for _ in range(64):
        y_new = (4.0 * (target + tau * x_abs * y)) ** 0.25
        if y_new <= y * (1 + 1e-12):
            break
        y = y_new
    return 1.05 * max(y, y_new)


class WeightTable:
    """Evaluates w_j, the scaled moments mhat_j, and both transforms.

    Immutable after construction; per-x moment vectors are cached, so
    reads are cheap and thread-safe once warm.
    """

    def __init__(self, cfg: ModelConfig, max_order: int | None = None):
        self.cfg = cfg
        self.max_order = max(max_order if max_order is not None else cfg.n + 4, 4)
        self._cache: dict = {}

    # ---- y-side moments ---------------------------------------------------

    def log_scale(self, x):
        """g(x) = n (3/4) (tau |x|)^{4/3}, the log of the moment scale."""
        return self.cfg.n * 0.75 * (self.cfg.tau * np.abs(x)) ** (4.0 / 3.0)

    def moments_scaled(self, x: float) -> np.ndarray:
        """mhat_k(x) for k = 0..max_order at a single real x."""
        x = float(x)
        key = x
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        n, tau = self.cfg.n, self.cfg.tau
        ax = abs(x)
        g = float(self.log_scale(ax))
        yc = _y_cutoff(n, tau, ax, g)

        def integrand(y):
            e = np.exp(-n * (y ** 4 / 4.0 - tau * ax * y) - g)
            return np.stack([e, y * e, y * y * e])

        base = adaptive_quad(integrand, -yc, yc, tol=self.cfg.quad_tol)
        m = np.empty(self.max_order + 1)
        m[:3] = base
        for k in range(self.max_order - 2):
            prev = m[k - 1] if k >= 1 else 0.0
            m[k + 3] = (k * prev + n * tau * ax * m[k]) / n
        if x < 0:
            m = m * (-1.0) ** np.arange(self.max_order + 1)
        self._cache[key] = m
        return m

    # ---- weights and transforms ------------------------------------------

    def weight(self, j: int, x):
        """w_j(x); literally the transform of the monomial y^j."""
        if j < 0 or j > self.max_order:
            raise TwomatError("weight order %d outside table (max %d)"
                              % (j, self.max_order))
        coeffs = np.zeros(j + 1)
        coeffs[j] = 1.0
        return self.transform_q(coeffs, x)

    def transform_q(self, coeffs, x):
        """Q[q](x) for q given by ascending power coefficients."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim != 1 or len(coeffs) - 1 > self.max_order:
            raise TwomatError("polynomial degree exceeds moment table")
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty(xs.shape)
        for i, xi in enumerate(xs.ravel()):
            m = self.moments_scaled(xi)[:len(coeffs)]
            s = float(coeffs @ m)
            expo = self.log_scale(xi) - self.cfg.n * self.cfg.v(xi)
            out.ravel()[i] = s * np.exp(expo)
        return out if np.ndim(x) else float(out.ravel()[0])

    # x-side: the exponent -n(V(x) - tau x y) is maximized numerically
    # (V' need not be monotone), then the integral is scaled by that peak.

    def _x_peak(self, y_abs):
        n, tau = self.cfg.n, self.cfg.tau
        deg, top = self.cfg.degree, self.cfg.v_coeffs[self.cfg.degree]
        reach = 1.0 + (2.0 * (1.0 + tau * y_abs) / top) ** (1.0 / (deg - 1))
        grid = np.linspace(0.0, 2.0 * reach, 4001)
        h = tau * y_abs * grid - self.cfg.v(grid)
        i = int(np.argmax(h))
        lo, hi = max(i - 1, 0), min(i + 1, len(grid) - 1)
        fine = np.linspace(grid[lo], grid[hi], 2001)
        hf = tau * y_abs * fine - self.cfg.v(fine)
        j = int(np.argmax(hf))
        return float(hf[j]) * n, 2.0 * reach

    def transform_p(self, coeffs, y):
        """P[p](y) for p given by ascending power coefficients."""
        coeffs = np.asarray(coeffs, dtype=float)
        n, tau = self.cfg.n, self.cfg.tau
        ys = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.empty(ys.shape)
        for i, yi in enumerate(ys.ravel()):
            ay = abs(yi)
            # y < 0 is mapped to |y| through x -> -x (V is even), which
            # just flips the odd polynomial coefficients.
            cc = coeffs if yi >= 0 else coeffs * (-1.0) ** np.arange(len(coeffs))
            peak, reach = self._x_peak(ay)
            xc = reach
            while n * (self.cfg.v(xc) - tau * ay * xc) + peak < _LOG_CUT:
                xc *= 1.5

            def integrand(x, _cc=cc, _ay=ay, _peak=peak):
                e = np.exp(-n * (self.cfg.v(x) - tau * _ay * x) - _peak)
                return np.polynomial.polynomial.polyval(x, _cc) * e

            val = adaptive_quad(integrand, -xc, xc, tol=self.cfg.quad_tol)
            out.ravel()[i] = val * np.exp(peak - n * self.cfg.w(yi))
        return out if np.ndim(y) else float(out.ravel()[0])
