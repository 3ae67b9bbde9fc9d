"""Biorthogonal polynomials p_k, q_k, norms h_k, and the four finite-n
correlation kernels.

The defining property is

    int int p_j(x) q_k(y) e^{-n(V(x) + W(y) - tau x y)} dx dy = h_j delta_jk

with p_j, q_k monic.  Monomials are numerically toxic at n ~ 24, so the
working basis is Chebyshev polynomials of scaled arguments T_a(x/sx),
T_b(y/sy), with sx, sy estimated from where the effective one-sided
densities fall below 1e-16 of peak.  The coupling (Gram) matrix in that
basis is factorized as C = L D U by Doolittle elimination; total
positivity of the coupling weight makes every pivot positive (a pivot
<= 0 therefore signals insufficient working precision, not a property
of the model).  Rows of L^{-1} / columns of U^{-1} are the polynomial
coefficients, rescaled to make the families monic in x and y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as _cheb

from .config import ModelConfig
from .errors import DimensionError, GramSingular, TwomatError
from .quadrature import adaptive_quad, gauss_legendre
from .weights import WeightTable, _LOG_CUT


# ---------------------------------------------------------------------------
# support-scale estimation


# The basis scale should track the *bulk* of the effective densities (the
# n->infty support), not the far tails: the one-sided exponents behave as
# n * phi(x) with n-independent phi, so "phi drops DROP below its max"
# gives an n-stable interval a hair wider than the limiting support.
_SCALE_DROP = 4.0


def _x_scale(cfg: ModelConfig) -> float:
    """Half-width of the bulk of exp(g(x) - n V(x))."""
    wt = WeightTable(cfg, max_order=4)
    expo = lambda x: (wt.log_scale(x) - cfg.n * cfg.v(x)) / cfg.n
    hi = 1.0
    while expo(hi) > expo(0.0) - 2 * _SCALE_DROP:
        hi *= 1.5
    grid = np.linspace(0.0, hi, 2001)
    vals = expo(grid)
    peak = vals.max()
    idx = np.nonzero(vals >= peak - _SCALE_DROP)[0].max()
    return max(grid[idx], 1e-2)


def _y_scale(cfg: ModelConfig) -> float:
    """Same for the y-marginal exponent max_x(tau x y - V(x)) - W(y)."""
    wt = WeightTable(cfg, max_order=4)
    def expo(y):
        peak, _ = wt._x_peak(abs(y))
        return (peak - cfg.n * cfg.w(y)) / cfg.n
    hi = 1.0
    while expo(hi) > expo(0.0) - 2 * _SCALE_DROP:
        hi *= 1.5
    ys = np.linspace(0.0, hi, 2001)
    vals = np.array([expo(t) for t in ys])
    peak = vals.max()
    idx = np.nonzero(vals >= peak - _SCALE_DROP)[0].max()
    return max(ys[idx], 1e-2)


# ---------------------------------------------------------------------------


@dataclass
class BiorthoSystem:
    """Monic biorthogonal families in a scaled Chebyshev basis.

    p_cheb[k] / q_cheb[k] hold coefficients of p_k / q_k in T_a(x/sx) /
    T_b(y/sy); h[k] are the norms; gram_cheb is the coupling matrix in
    the working basis, cond_report its conditioning data.
    """

    cfg: ModelConfig
    sx: float
    sy: float
    p_cheb: np.ndarray
    q_cheb: np.ndarray
    h: np.ndarray
    gram_cheb: np.ndarray
    cond_report: dict
    _table: WeightTable

    # -- evaluation --------------------------------------------------------

    def eval_p(self, k: int, x):
        if self.cond_report.get("mp") is not None:
            return self.eval_p_all(x)[k]
        return _cheb.chebval(np.asarray(x) / self.sx, self.p_cheb[k])

    def eval_q(self, k: int, y):
        if self.cond_report.get("mp") is not None:
            return self.eval_q_all(y)[k]
        return _cheb.chebval(np.asarray(y) / self.sy, self.q_cheb[k])

    def eval_p_all(self, x):
        """Values p_k(x) for all k as shape (N+1,) + x.shape.

        Escalated systems re-sum the rows at working precision: deep in
        the bulk p_k is exponentially smaller than its own Chebyshev
        coefficients, so float64 summation of the downcast tables loses
        up to ~14 digits by n = 24 while the mp route keeps the values
        exact to float64 rounding.
        """
        if self.cond_report.get("mp") is not None:
            from .biortho_mp import eval_rows_mp
            xs = np.atleast_1d(np.asarray(x, dtype=float))
            out = eval_rows_mp(self, "p", xs.ravel())
            out = out.reshape(out.shape[:1] + xs.shape)
            return out if np.ndim(x) else out[:, 0]
        xv = np.atleast_1d(np.asarray(x, dtype=float)) / self.sx
        vander = _cheb.chebvander(xv, self.p_cheb.shape[1] - 1)
        out = np.moveaxis(vander @ self.p_cheb.T, -1, 0)
        return out if np.ndim(x) else out[:, 0]

    def eval_q_all(self, y):
        if self.cond_report.get("mp") is not None:
            from .biortho_mp import eval_rows_mp
            ys = np.atleast_1d(np.asarray(y, dtype=float))
            out = eval_rows_mp(self, "q", ys.ravel())
            out = out.reshape(out.shape[:1] + ys.shape)
            return out if np.ndim(y) else out[:, 0]
        yv = np.atleast_1d(np.asarray(y, dtype=float)) / self.sy
        vander = _cheb.chebvander(yv, self.q_cheb.shape[1] - 1)
        out = np.moveaxis(vander @ self.q_cheb.T, -1, 0)
        return out if np.ndim(y) else out[:, 0]

    # -- transforms ----------------------------------------------------------

    def cheb_moments(self, x: float) -> np.ndarray:
        """Mhat_b(x) = int T_b(y/sy) e^{-n(y^4/4 - tau x y) - g(x)} dy."""
        x = float(x)
        cache = self._cm_cache
        hit = cache.get(x)
        if hit is not None:
            return hit
        cfg = self.cfg
        n, tau = cfg.n, cfg.tau
        g = float(self._table.log_scale(x))
        from .weights import _y_cutoff
        yc = _y_cutoff(n, tau, abs(x), g)
        nb = self.q_cheb.shape[1]

        def integrand(y):
            e = np.exp(-n * (y ** 4 / 4.0 - tau * x * y) - g)
            tv = _cheb.chebvander(y / self.sy, nb - 1)
            return tv.T * e

        out = adaptive_quad(integrand, -yc, yc, tol=cfg.quad_tol)
        cache[x] = out
        return out

    def eval_Q(self, k: int, x):
        """Q_k(x) = e^{-nV(x)} int q_k(y) e^{-n(W - tau x y)} dy."""
        if self.cond_report.get("mp") is not None:
            return self.eval_Q_all(x)[k]
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty(xs.shape)
        for i, xi in enumerate(xs.ravel()):
            mh = self.cheb_moments(xi)
            expo = float(self._table.log_scale(xi)) - self.cfg.n * self.cfg.v(xi)
            out.ravel()[i] = float(self.q_cheb[k] @ mh) * np.exp(expo)
        return out if np.ndim(x) else float(out.ravel()[0])

    def eval_Q_all(self, x):
        if self.cond_report.get("mp") is not None:
            from .biortho_mp import eval_Q_rows_mp
            xs = np.atleast_1d(np.asarray(x, dtype=float))
            out = eval_Q_rows_mp(self, xs.ravel())
            out = out.reshape(out.shape[:1] + xs.shape)
            return out if np.ndim(x) else out[:, 0]
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((self.q_cheb.shape[0],) + xs.shape)
        for i, xi in enumerate(xs.ravel()):
            mh = self.cheb_moments(xi)
            expo = float(self._table.log_scale(xi)) - self.cfg.n * self.cfg.v(xi)
            out[:, i] = (self.q_cheb @ mh) * np.exp(expo)
        return out if np.ndim(x) else out[:, 0]

    def eval_P(self, k: int, y):
        """P_k(y) = e^{-nW(y)} int p_k(x) e^{-n(V - tau x y)} dx."""
        if self.cond_report.get("mp") is not None:
            return self._eval_P_rows(self.p_cheb, y)[k]
        return self._eval_P_rows(self.p_cheb[k:k + 1], y)[0]

    def eval_P_all(self, y):
        return self._eval_P_rows(self.p_cheb, y)

    def _eval_P_rows(self, rows, y):
        if self.cond_report.get("mp") is not None and rows is self.p_cheb:
            from .biortho_mp import eval_P_rows_mp
            ys = np.atleast_1d(np.asarray(y, dtype=float))
            out = eval_P_rows_mp(self, ys.ravel())
            out = out.reshape(out.shape[:1] + ys.shape)
            return out if np.ndim(y) else out[:, 0]
        cfg = self.cfg
        n, tau = cfg.n, cfg.tau
        ys = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.empty((rows.shape[0],) + ys.shape)
        wt = self._table
        for i, yi in enumerate(ys.ravel()):
            peak, reach = wt._x_peak(abs(yi))
            xc = reach
            while n * (cfg.v(xc) - tau * abs(yi) * xc) + peak < _LOG_CUT:
                xc *= 1.5

            def integrand(xx, _y=yi, _peak=peak):
                e = np.exp(-n * (cfg.v(xx) - tau * _y * xx) - _peak)
                tv = _cheb.chebvander(xx / self.sx, rows.shape[1] - 1)
                return (rows @ tv.T) * e

            val = adaptive_quad(integrand, -xc, xc, tol=cfg.quad_tol)
            out[:, i] = val * np.exp(peak - n * cfg.w(yi))
        return out if np.ndim(y) else out[:, 0]

    @property
    def _cm_cache(self):
        try:
            return self.__dict__["_cm"]
        except KeyError:
            self.__dict__["_cm"] = {}
            return self.__dict__["_cm"]

    # -- monomial Gram report ------------------------------------------------

    def gram_monomial(self) -> np.ndarray:
        """G_{jk} = int int x^j y^k e^{-n(V+W-tau x y)} dx dy (report only)."""
        npow = self.p_cheb.shape[0]
        wt = self._table
        cfg = self.cfg
        xc = self.sx
        while cfg.n * cfg.v(xc) - wt.log_scale(xc) < _LOG_CUT:
            xc *= 1.25

        def integrand(x):
            rows = np.empty((npow, npow, len(x)))
            for i, xi in enumerate(x):
                m = wt.moments_scaled(xi)[:npow]
                expo = float(wt.log_scale(xi)) - cfg.n * cfg.v(xi)
                rows[:, :, i] = np.outer(xi ** np.arange(npow), m) * np.exp(expo)
            return rows

        return adaptive_quad(integrand, -xc, xc, tol=max(cfg.quad_tol, 1e-13))


def build_biortho(cfg: ModelConfig, degree: int | None = None,
                  scales: tuple[float, float] | None = None) -> BiorthoSystem:
    """Construct the biorthogonal system up to degree n (inclusive).

    Tries double precision first (when cfg allows it); if the quick
    re-integration residual misses the 1e-8 contract — the Gram pivot
    spread h_0/h_n amplifies roundoff by exactly that ratio — the build
    silently escalates to the extended-precision path and records the
    escalation in cond_report.  `scales` overrides the automatic basis
    scaling (sx, sy); the monic families are basis-independent, which
    the test suite exercises through exactly this hook.
    """
    if cfg.bits > 53:
        from . import biortho_mp
        return biortho_mp.build_biortho_mp(cfg, degree, scales=scales)
    try:
        system = _build_biortho_f64(cfg, degree, scales)
        quick = residual_matrix(system, panels=8, order=48)
        if quick.max() < 1e-9:
            return system
        note = {"float64_residual": float(quick.max())}
    except GramSingular as exc:
        note = {"float64_failure": str(exc)}
    from . import biortho_mp
    system = biortho_mp.build_biortho_mp(cfg, degree, scales=scales)
    system.cond_report.update(note)
    return system


def _build_biortho_f64(cfg: ModelConfig, degree: int | None = None,
                       scales: tuple[float, float] | None = None
                       ) -> BiorthoSystem:
    nn = cfg.n if degree is None else degree
    sx = float(scales[0]) if scales else _x_scale(cfg)
    sy = float(scales[1]) if scales else _y_scale(cfg)
    wt = WeightTable(cfg, max_order=nn + 4)
    sys0 = BiorthoSystem(cfg=cfg, sx=sx, sy=sy,
                         p_cheb=np.eye(nn + 1), q_cheb=np.eye(nn + 1),
                         h=np.ones(nn + 1), gram_cheb=np.eye(nn + 1),
                         cond_report={}, _table=wt)

    # coupling matrix in the scaled Chebyshev basis
    xc = sx
    while cfg.n * cfg.v(xc) - wt.log_scale(xc) < _LOG_CUT:
        xc *= 1.25

    def integrand(x):
        out = np.empty((nn + 1, nn + 1, len(x)))
        for i, xi in enumerate(x):
            mh = sys0.cheb_moments(float(xi))
            expo = float(wt.log_scale(xi)) - cfg.n * cfg.v(xi)
            ta = _cheb.chebvander(xi / sx, nn).ravel()
            out[:, :, i] = np.outer(ta, mh) * np.exp(expo)
        return out

    C = adaptive_quad(integrand, -xc, xc, tol=cfg.quad_tol)
    # parity of the even model: odd a+b entries vanish identically
    par = (np.arange(nn + 1)[:, None] + np.arange(nn + 1)[None, :]) % 2 == 1
    C[par] = 0.0

    L, D, U = _ldu(C)

    # polynomial coefficients in the working basis: rows of L^{-1}, with
    # a final rescale making each family monic in its own variable.
    A = np.linalg.solve(L, np.eye(nn + 1))          # unit lower triangular
    B = np.linalg.solve(U.T, np.eye(nn + 1))        # unit lower triangular
    lead_x = np.array([(2.0 ** max(k - 1, 0)) / sx ** k for k in range(nn + 1)])
    lead_y = np.array([(2.0 ** max(k - 1, 0)) / sy ** k for k in range(nn + 1)])
    p_cheb = A / lead_x[:, None]
    q_cheb = B / lead_y[:, None]
    h = D / (lead_x * lead_y)

    cond = {"cheb_gram_cond": float(np.linalg.cond(C)),
            "pivot_ratio": float(D.max() / D.min()),
            "sx": sx, "sy": sy}
    return BiorthoSystem(cfg=cfg, sx=sx, sy=sy, p_cheb=p_cheb, q_cheb=q_cheb,
                         h=h, gram_cheb=C, cond_report=cond, _table=wt)


def _ldu(C):
    """Doolittle LDU without pivoting; pivots must stay positive."""
    m = C.shape[0]
    L = np.eye(m)
    U = np.eye(m)
    D = np.zeros(m)
    S = C.astype(float).copy()
    for k in range(m):
        piv = S[k, k]
        if not np.isfinite(piv) or piv <= 0.0:
            raise GramSingular(
                "leading principal minor %d is %g at working precision"
                % (k + 1, piv))
        D[k] = piv
        L[k + 1:, k] = S[k + 1:, k] / piv
        U[k, k + 1:] = S[k, k + 1:] / piv
        S[k + 1:, k + 1:] -= np.outer(L[k + 1:, k], S[k, k + 1:])
    return L, D, U


# ---------------------------------------------------------------------------
# kernels


def kernel_11(sys: BiorthoSystem, x1, x2):
    """K11(x1, x2) = sum_{j<n} p_j(x1) Q_j(x2) / h_j."""
    n = sys.cfg.n
    pv = sys.eval_p_all(float(x1))[:n]
    qv = sys.eval_Q_all(float(x2))[:n]
    return float((pv / sys.h[:n]) @ qv)


def kernel_11_grid(sys: BiorthoSystem, xs1, xs2):
    """K11 on the product grid xs1 x xs2 (vectorized)."""
    n = sys.cfg.n
    pv = sys.eval_p_all(np.asarray(xs1, dtype=float))[:n]
    qv = sys.eval_Q_all(np.asarray(xs2, dtype=float))[:n]
    return (pv / sys.h[:n, None]).T @ qv


def kernel_12(sys: BiorthoSystem, x, y):
    """K12(x, y) = sum_{j<n} p_j(x) q_j(y) / h_j."""
    n = sys.cfg.n
    pv = sys.eval_p_all(x)[:n]
    qv = sys.eval_q_all(y)[:n]
    return float((pv / sys.h[:n]) @ qv)


def kernel_21(sys: BiorthoSystem, y1, y2):
    """K21(y1, y2) = sum_{j<n} P_j(y1) Q_j(y2) / h_j - e^{-n(V(y1)+W(y2)-tau y1 y2)}.

    The subtracted coupling factor is implemented verbatim with V on the
    first argument and W on the second.  (A type-consistent alternative
    would put W on the first, y-like argument and V on the second; the
    verbatim convention is kept deliberately and flagged here.)
    """
    cfg = sys.cfg
    n = cfg.n
    pv = sys.eval_P_all(y1)[:n]
    qv = sys.eval_Q_all(y2)[:n]
    cross = np.exp(-n * (cfg.v(y1) + cfg.w(y2) - cfg.tau * y1 * y2))
    return float((pv / sys.h[:n]) @ qv - cross)


def kernel_22(sys: BiorthoSystem, y1, y2):
    """K22(y1, y2) = sum_{j<n} P_j(y1) q_j(y2) / h_j."""
    n = sys.cfg.n
    pv = sys.eval_P_all(y1)[:n]
    qv = sys.eval_q_all(y2)[:n]
    return float((pv / sys.h[:n]) @ qv)


class KernelEvaluator:
    """Callable wrapper for one of the four kernels of the coupled model."""

    _TABLE = {"11": kernel_11, "12": kernel_12, "21": kernel_21,
              "22": kernel_22}

    def __init__(self, system: BiorthoSystem, which: str = "11"):
        if which not in self._TABLE:
            raise TwomatError("kernel selector must be one of 11, 12, 21, 22")
        self.system = system
        self.which = which

    def __call__(self, a, b):
        return self._TABLE[self.which](self.system, a, b)


def correlation(sys: BiorthoSystem, xs, ys) -> float:
    """Determinantal correlation of m first-type and l second-type points:
    det [[K11(x_i, x_j), K12(x_i, y_j)], [K21(y_i, x_j), K22(y_i, y_j)]].
    """
    xs = [float(v) for v in np.atleast_1d(xs)] if xs is not None else []
    ys = [float(v) for v in np.atleast_1d(ys)] if ys is not None else []
    m, l = len(xs), len(ys)
    if m > sys.cfg.n or l > sys.cfg.n:
        raise DimensionError("correlation orders (%d, %d) exceed n = %d"
                             % (m, l, sys.cfg.n))
    if m + l == 0:
        return 1.0
    M = np.empty((m + l, m + l))
    for i, xi in enumerate(xs):
        for j, xj in enumerate(xs):
            M[i, j] = kernel_11(sys, xi, xj)
        for j, yj in enumerate(ys):
            M[i, m + j] = kernel_12(sys, xi, yj)
    for i, yi in enumerate(ys):
        for j, xj in enumerate(xs):
            M[m + i, j] = kernel_21(sys, yi, xj)
        for j, yj in enumerate(ys):
            M[m + i, m + j] = kernel_22(sys, yi, yj)
    return float(np.linalg.det(M))


def residual_matrix(sys: BiorthoSystem, panels: int = 10, order: int = 60,
                    force_f64: bool = False) -> np.ndarray:
    """|<p_j, q_k> - h_j delta_jk| / h_j on a fixed tensor Gauss-Legendre
    grid (deterministic, independent of the adaptive build quadrature).
    Systems built at extended precision dispatch to the mp oracle, since
    a float64 tensor rule cannot resolve residuals below eps * h_0/h_j.
    """
    if sys.cond_report.get("mp") is not None and not force_f64:
        from .biortho_mp import residual_matrix_mp
        return residual_matrix_mp(sys)
    cfg = sys.cfg
    nn = sys.p_cheb.shape[0] - 1
    wt = sys._table
    xc = sys.sx
    while cfg.n * cfg.v(xc) - wt.log_scale(xc) < _LOG_CUT:
        xc *= 1.25
    yc = sys.sy
    while True:
        peak, _ = wt._x_peak(yc)
        if cfg.n * cfg.w(yc) - peak >= _LOG_CUT:
            break
        yc *= 1.25
    gx, gw = gauss_legendre(order)
    bx = np.linspace(-xc, xc, panels + 1)
    xs = (0.5 * (bx[1:] + bx[:-1])[:, None] + 0.5 * np.diff(bx)[:, None] * gx).ravel()
    wxs = (0.5 * np.diff(bx)[:, None] * gw[None, :]).ravel()
    by = np.linspace(-yc, yc, panels + 1)
    ys = (0.5 * (by[1:] + by[:-1])[:, None] + 0.5 * np.diff(by)[:, None] * gx).ravel()
    wys = (0.5 * np.diff(by)[:, None] * gw[None, :]).ravel()
    E = (-cfg.n * (cfg.v(xs)[:, None] + cfg.w(ys)[None, :]
                   - cfg.tau * xs[:, None] * ys[None, :]))
    Wm = np.exp(E) * wxs[:, None] * wys[None, :]
    P = sys.eval_p_all(xs)
    Q = sys.eval_q_all(ys)
    Gpq = P @ Wm @ Q.T
    return np.abs(Gpq - np.diag(sys.h[:nn + 1])) / sys.h[:nn + 1, None]
