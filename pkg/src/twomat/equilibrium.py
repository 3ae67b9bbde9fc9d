"""Constrained three-measure equilibrium problem.

The energy functional couples a measure nu1 on the real line (mass 1,
external field V(x) - (3/4) tau^{4/3} |x|^{4/3}), a measure nu2 on the
imaginary axis (mass 2/3, constrained above by the reference measure
sigma with density (sqrt(3)/2pi) tau^{4/3} |t|^{1/3}), and a measure nu3
on the real line (mass 1/3):

    E(nu1, nu2, nu3) = sum_j I(nu_j, nu_j) - I(nu1, nu2) - I(nu2, nu3)
                       + int (V(x) - (3/4) tau^{4/3} |x|^{4/3}) dnu1(x),

with I(mu, nu) = int int log 1/|x - y| dmu(x) dnu(y).  The minimizer
(mu1, mu2, mu3) determines the support endpoints lambda_1 < ... <
lambda_{2g+2} of mu1, the saturation point c > 0 where sigma - mu2
stops vanishing, the cut mass fractions alpha_k, and the variational
constant l of the equality condition

    2 U^{mu1}(x) - U^{mu2}(x) + V(x) - (3/4) tau^{4/3} |x|^{4/3} = l

on the support of mu1 (U is the logarithmic potential -int log|z-s|).

Two cooperating solvers live here:

* a cell solver: midpoint cells, exact per-cell self-energy, accelerated
  projected gradient (monotone, with restarts) plus an active-set Newton
  polish.  It is globally convergent on this convex problem and finds
  the support topology (genus) without prior structure assumptions;
* a spectral refinement (``eqrefine``): square-root-edge Chebyshev
  densities on the cuts, a constrained tail basis for the deficit
  sigma - mu2, and closed-form elimination of mu3, polished by a small
  geometry optimization.  It sharpens endpoints and densities to ~1e-9
  and is cross-checked against the cell solution.

Both solutions are kept; `EquilibriumSolution` carries the cell
measures, the refined geometry, and the spectral payload used by the
spectral-curve stage.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import Callable, Optional

import numpy as np

from .config import ModelConfig
from .errors import ConstraintViolation, NoConvergence, NonRegularPotential

__all__ = [
    "DiscretizedMeasure", "EquilibriumSolution", "GridSpec",
    "sigma_density", "sigma_interval_mass", "external_field",
    "energy", "solve_equilibrium", "variational_report", "edge_constants",
    "solution_to_json", "write_density_csv",
]

_MASS_TOL = 1e-8          # constraint tolerance for the energy() entry point
_OFF_SUPPORT_MASS = 1e-8  # cell mass below this counts as off-support


# ----------------------------------------------------------------------
# reference measure sigma and the external field
# ----------------------------------------------------------------------

def sigma_density(cfg: ModelConfig, t):
    """Density of the constraint measure sigma on the imaginary axis,
    with respect to arclength |dz|: (sqrt(3)/2pi) tau^{4/3} |t|^{1/3}."""
    t = np.asarray(t, dtype=float)
    return (np.sqrt(3.0) / (2.0 * np.pi)) * cfg.tau ** (4.0 / 3.0) \
        * np.abs(t) ** (1.0 / 3.0)


def sigma_interval_mass(cfg: ModelConfig, t0, t1):
    """Exact sigma mass of the arclength interval [t0, t1], 0 <= t0 <= t1."""
    t0 = np.asarray(t0, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    if np.any(t0 < -1e-15) or np.any(t1 < t0):
        raise ValueError("need 0 <= t0 <= t1")
    kap = (np.sqrt(3.0) / (2.0 * np.pi)) * cfg.tau ** (4.0 / 3.0)
    return kap * 0.75 * (np.abs(t1) ** (4.0 / 3.0) - np.abs(t0) ** (4.0 / 3.0))


def external_field(cfg: ModelConfig, x):
    """V(x) - (3/4) tau^{4/3} |x|^{4/3}, the field acting on nu1 only."""
    x = np.asarray(x, dtype=float)
    return cfg.v(x) - 0.75 * cfg.tau ** (4.0 / 3.0) \
        * np.abs(x) ** (4.0 / 3.0)


# ----------------------------------------------------------------------
# discretized measures
# ----------------------------------------------------------------------

_LABEL_MASS = {"nu1": 1.0, "nu2": 2.0 / 3.0, "nu3": 1.0 / 3.0}


@dataclasses.dataclass(frozen=True)
class DiscretizedMeasure:
    """A measure on a uniform midpoint-cell grid.

    ``axis`` is 'real' or 'imag'; centers are the (symmetric) cell
    midpoints as real numbers (for 'imag' they are the arclength
    coordinates t of the points it).  Cell i covers
    [center_i - h/2, center_i + h/2].
    """
    axis: str
    centers: np.ndarray
    h: float
    masses: np.ndarray
    label: str

    def __post_init__(self):
        if self.axis not in ("real", "imag"):
            raise ValueError("axis must be 'real' or 'imag'")
        c = np.asarray(self.centers, dtype=float)
        m = np.asarray(self.masses, dtype=float)
        if c.shape != m.shape or c.ndim != 1:
            raise ValueError("centers and masses must be matching 1-d arrays")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "masses", m)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def density(self) -> np.ndarray:
        return self.masses / self.h

    def validate(self, cfg: Optional[ModelConfig] = None,
                 tol: float = _MASS_TOL) -> None:
        """Raise ConstraintViolation on negative mass, a wrong total for a
        nu-label, a sigma-cap violation (nu2), or an asymmetric grid."""
        if np.any(self.masses < -1e-14):
            raise ConstraintViolation("negative cell mass in %s" % self.label)
        want = _LABEL_MASS.get(self.label)
        if want is not None and abs(self.total_mass - want) > tol:
            raise ConstraintViolation(
                "%s total mass %.12g != %.12g" % (self.label, self.total_mass,
                                                  want))
        srt = np.sort(self.centers)
        if not np.allclose(srt + srt[::-1], 0.0, atol=1e-12 * (1 + srt[-1])):
            raise ConstraintViolation("grid of %s is not symmetric"
                                      % self.label)
        if self.label == "nu2":
            if cfg is None:
                raise ValueError("validating nu2 requires the model config")
            cap = sigma_interval_mass(cfg, np.abs(self.centers) - self.h / 2,
                                      np.abs(self.centers) + self.h / 2)
            if np.any(self.masses > cap + tol):
                raise ConstraintViolation(
                    "nu2 exceeds the sigma cell cap by %.3g"
                    % float(np.max(self.masses - cap)))

    def mirrored(self) -> "DiscretizedMeasure":
        """The pushforward under s -> -s (same grid, masses reversed)."""
        order = np.argsort(-self.centers)
        return DiscretizedMeasure(self.axis, -self.centers[order], self.h,
                                  self.masses[order], self.label)


def _half_to_full(axis, centers_half, h, masses_half, label):
    """Build the symmetric full-grid measure from positive-side cells,
    each carrying its own mass again on the mirror side."""
    c = np.concatenate([-centers_half[::-1], centers_half])
    m = np.concatenate([masses_half[::-1], masses_half])
    return DiscretizedMeasure(axis, c, h, m, label)


# ----------------------------------------------------------------------
# energy of discretized measures (public entry point)
# ----------------------------------------------------------------------

def _self_energy(meas: DiscretizedMeasure) -> float:
    """I(nu, nu) with the exact uniform-cell diagonal (3/2 - log h) m^2."""
    x = meas.centers
    m = meas.masses
    d = np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(d, 1.0)
    q = float(m @ (-np.log(d)) @ m)
    q += float((1.5 - np.log(meas.h)) * (m @ m))
    return q


def _cross_energy(a: DiscretizedMeasure, b: DiscretizedMeasure) -> float:
    """I(a, b) for measures on perpendicular axes (real vs imag) or the
    same axis (midpoint rule; grids must not collide on the same axis)."""
    if a.axis == b.axis:
        d = np.abs(a.centers[:, None] - b.centers[None, :])
        if np.min(d) < 1e-13:
            raise ConstraintViolation(
                "cross energy on one axis needs disjoint grids")
        k = -np.log(d)
    else:
        r = a.centers if a.axis == "real" else b.centers
        t = b.centers if a.axis == "real" else a.centers
        if a.axis == "real":
            k = -0.5 * np.log(r[:, None] ** 2 + t[None, :] ** 2)
        else:
            k = -0.5 * np.log(t[:, None] ** 2 + r[None, :] ** 2)
    return float(a.masses @ k @ b.masses)


def energy(v1: DiscretizedMeasure, v2: DiscretizedMeasure,
           v3: DiscretizedMeasure, cfg: ModelConfig) -> float:
    """Discretized E(nu1, nu2, nu3); validates the constraint set first."""
    if (v1.label, v2.label, v3.label) != ("nu1", "nu2", "nu3"):
        raise ConstraintViolation("measures must be labeled nu1, nu2, nu3")
    if v1.axis != "real" or v2.axis != "imag" or v3.axis != "real":
        raise ConstraintViolation("axes must be real / imag / real")
    for v in (v1, v2, v3):
        v.validate(cfg)
    val = _self_energy(v1) + _self_energy(v2) + _self_energy(v3)
    val -= _cross_energy(v1, v2)
    val -= _cross_energy(v2, v3)
    val += float(external_field(cfg, v1.centers) @ v1.masses)
    return val


# ----------------------------------------------------------------------
# cell solver on the symmetric half grids
# ----------------------------------------------------------------------

@dataclasses.dataclass
class GridSpec:
    """Resolution/budget knobs for the cell solver.  Any field left at
    None is auto-sized from the potential."""
    n1: Optional[int] = None
    x1: Optional[float] = None
    n2_per_unit: int = 24          # cells per unit length on the axes
    x23: float = 24.0              # initial half-range for nu2 / nu3
    doublings: int = 2             # refinement rounds for x23
    max_iter: int = 40000
    kkt_tol: float = 3e-7
    refine: bool = True            # run the spectral polish


def _auto_x1(cfg: ModelConfig) -> float:
    """Half-range for nu1: where the external field has climbed well past
    its minimum the support cannot reach (the field is the only
    confinement; 12 units of climb is far beyond the Lagrange level)."""
    x = np.linspace(0.0, 60.0, 6001)[1:]
    q = external_field(cfg, x)
    lev = q.min() + 12.0
    above = np.nonzero(q > lev)[0]
    edge = x[above[0]] if len(above) else 60.0
    return float(min(max(2.0 * edge, 3.0), 60.0))


class _HalfGrids:
    """Half grids, reduced interaction matrices and field vector.

    Masses are stored for the positive half; the full measure repeats
    them on the mirror side.  For half vectors u, v of the same measure
    the full quadratic form is u^T A v with
    A = 2 [ K(x_i, x_j) + K(x_i, -x_j) ],  K = -log distance,
    and the diagonal K(x_i, x_i) replaced by the exact cell average
    3/2 - log h.  Cross forms between different measures use the same
    mirror folding.
    """

    def __init__(self, cfg: ModelConfig, n1, x1, n2, x2, n3, x3):
        self.cfg = cfg
        self.c1, self.h1 = self._half(x1, n1)
        self.c2, self.h2 = self._half(x2, n2)
        self.c3, self.h3 = self._half(x3, n3)
        self.cap2 = sigma_interval_mass(cfg, self.c2 - self.h2 / 2,
                                        self.c2 + self.h2 / 2)
        self.A11 = self._self_mat(self.c1, self.h1)
        self.A22 = self._self_mat(self.c2, self.h2)
        self.A33 = self._self_mat(self.c3, self.h3)
        self.A12 = self._perp_mat(self.c1, self.c2)
        self.A32 = self._perp_mat(self.c3, self.c2)
        self.q1 = 2.0 * external_field(cfg, self.c1)

    @staticmethod
    def _half(x, n):
        h = x / n
        return (np.arange(n) + 0.5) * h, h

    @staticmethod
    def _self_mat(c, h):
        d = np.abs(c[:, None] - c[None, :])
        np.fill_diagonal(d, 1.0)
        a = -np.log(d)
        np.fill_diagonal(a, 1.5 - np.log(h))
        a = a - np.log(c[:, None] + c[None, :])
        return 2.0 * a

    @staticmethod
    def _perp_mat(cr, ci):
        # full-form cross matrix folded to half vectors: the four mirror
        # combinations collapse to 2 * (2 * -1/2 log(x^2+t^2))
        return -2.0 * np.log(cr[:, None] ** 2 + ci[None, :] ** 2)

    # energy and gradient in half-mass variables (sum m1 = 1/2 etc.)
    def energy(self, m1, m2, m3):
        return (m1 @ self.A11 @ m1 + m2 @ self.A22 @ m2 + m3 @ self.A33 @ m3
                - m1 @ self.A12 @ m2 - m3 @ self.A32 @ m2 + self.q1 @ m1)

    def grads(self, m1, m2, m3):
        g1 = 2.0 * self.A11 @ m1 - self.A12 @ m2 + self.q1
        g2 = 2.0 * self.A22 @ m2 - self.A12.T @ m1 - self.A32.T @ m3
        g3 = 2.0 * self.A33 @ m3 - self.A32 @ m2
        return g1, g2, g3

    def lipschitz(self) -> float:
        rng = np.random.default_rng(7)
        v = [rng.standard_normal(len(c)) for c in (self.c1, self.c2, self.c3)]
        lam = 1.0
        for _ in range(40):
            w1 = 2 * self.A11 @ v[0] - self.A12 @ v[1]
            w2 = 2 * self.A22 @ v[1] - self.A12.T @ v[0] - self.A32.T @ v[2]
            w3 = 2 * self.A33 @ v[2] - self.A32 @ v[1]
            lam = np.sqrt(w1 @ w1 + w2 @ w2 + w3 @ w3)
            v = [w / lam for w in (w1, w2, w3)]
            nrm = np.sqrt(sum(w @ w for w in v))
            v = [w / nrm for w in v]
        return float(lam)


def _project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {m >= 0, sum m = total}."""
    u = np.sort(v)[::-1]
    cs = np.cumsum(u) - total
    idx = np.arange(1, len(u) + 1)
    rho = np.nonzero(u * idx > cs)[0][-1]
    theta = cs[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _project_capped(v: np.ndarray, total: float,
                    cap: np.ndarray) -> np.ndarray:
    """Projection onto {0 <= m <= cap, sum m = total} by bisection on the
    shift theta in clip(v - theta, 0, cap)."""
    if cap.sum() < total - 1e-13:
        raise ConstraintViolation("cap total below required mass")
    lo = float(np.min(v - cap))
    hi = float(np.max(v))
    f_lo = np.clip(v - lo, 0.0, cap).sum() - total   # >= 0
    if f_lo < 0:
        raise ConstraintViolation("capped projection infeasible")
    for _ in range(200):
        th = 0.5 * (lo + hi)
        s = np.clip(v - th, 0.0, cap).sum()
        if s > total:
            lo = th
        else:
            hi = th
        if hi - lo < 1e-16 * max(1.0, abs(hi)):
            break
    return np.clip(v - 0.5 * (lo + hi), 0.0, cap)


def _kkt_spread(g, m, cap=None, act_tol=1e-12):
    """Max gradient spread over free cells plus worst sign violation on
    active cells; 0 at an exact KKT point."""
    if cap is None:
        free = m > act_tol
    else:
        free = (m > act_tol) & (m < cap - act_tol)
    if not np.any(free):
        return np.inf
    gf = g[free]
    theta = 0.5 * (gf.max() + gf.min())
    spread = gf.max() - gf.min()
    viol = 0.0
    low = m <= act_tol
    if np.any(low):
        viol = max(viol, float(np.max(theta - g[low], initial=0.0)))
    if cap is not None:
        high = m >= cap - act_tol
        if np.any(high):
            viol = max(viol, float(np.max(g[high] - theta, initial=0.0)))
    return float(spread + max(viol, 0.0))


def _fista(grids: _HalfGrids, max_iter: int, kkt_tol: float,
           init=None, do_polish=True):
    """Monotone accelerated projected gradient with restarts and, inside
    the loop, active-set Newton polish attempts.  Returns
    (m1, m2, m3, info)."""
    n1, n3 = len(grids.c1), len(grids.c3)
    cap2 = grids.cap2
    if init is None:
        m1 = np.full(n1, 0.5 / n1)
        m2 = np.minimum(cap2, 2.0)
        m2 *= (1.0 / 3.0) / m2.sum()
        m3 = np.full(n3, 1.0 / 6.0 / n3)
    else:
        m1 = _project_simplex(init[0].copy(), 0.5)
        m2 = _project_capped(init[1].copy(), 1.0 / 3.0, cap2)
        m3 = _project_simplex(init[2].copy(), 1.0 / 6.0)
    y1, y2, y3 = m1.copy(), m2.copy(), m3.copy()
    L = grids.lipschitz() * 1.1
    tk = 1.0
    e_prev = grids.energy(m1, m2, m3)
    energy_trace = [e_prev]
    kkt = np.inf
    it = 0
    check_every = 250
    last_polish = -10 ** 9
    polished_ok = False
    while it < max_iter:
        it += 1
        g1, g2, g3 = grids.grads(y1, y2, y3)
        p1 = _project_simplex(y1 - g1 / L, 0.5)
        p2 = _project_capped(y2 - g2 / L, 1.0 / 3.0, cap2)
        p3 = _project_simplex(y3 - g3 / L, 1.0 / 6.0)
        e_new = grids.energy(p1, p2, p3)
        if e_new > e_prev + 1e-15 * abs(e_prev):
            # momentum overshot: restart from the last accepted point
            y1, y2, y3 = m1.copy(), m2.copy(), m3.copy()
            tk = 1.0
            g1, g2, g3 = grids.grads(y1, y2, y3)
            p1 = _project_simplex(y1 - g1 / L, 0.5)
            p2 = _project_capped(y2 - g2 / L, 1.0 / 3.0, cap2)
            p3 = _project_simplex(y3 - g3 / L, 1.0 / 6.0)
            e_new = grids.energy(p1, p2, p3)
            if e_new > e_prev + 1e-15 * abs(e_prev):
                # the step size bound was too optimistic after all
                L *= 1.5
                continue
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        beta = (tk - 1.0) / tn
        y1 = p1 + beta * (p1 - m1)
        y2 = p2 + beta * (p2 - m2)
        y3 = p3 + beta * (p3 - m3)
        m1, m2, m3 = p1, p2, p3
        tk = tn
        e_prev = e_new
        energy_trace.append(e_new)
        if it % check_every == 0:
            g1, g2, g3 = grids.grads(m1, m2, m3)
            kkt = max(_kkt_spread(g1, m1), _kkt_spread(g2, m2, cap2),
                      _kkt_spread(g3, m3))
            if kkt < kkt_tol:
                break
            if (do_polish and kkt < 100 * kkt_tol
                    and it - last_polish >= 2000):
                last_polish = it
                polished = _newton_polish(grids, m1, m2, m3)
                if polished is not None:
                    q1v, q2v, q3v = polished
                    if grids.energy(q1v, q2v, q3v) \
                            <= e_prev + 1e-14 * abs(e_prev):
                        m1, m2, m3 = q1v, q2v, q3v
                        g1, g2, g3 = grids.grads(m1, m2, m3)
                        kkt = max(_kkt_spread(g1, m1),
                                  _kkt_spread(g2, m2, cap2),
                                  _kkt_spread(g3, m3))
                        e_prev = grids.energy(m1, m2, m3)
                        energy_trace.append(e_prev)
                        if kkt < kkt_tol:
                            polished_ok = True
                            break
                        y1, y2, y3 = m1.copy(), m2.copy(), m3.copy()
                        tk = 1.0
    g1, g2, g3 = grids.grads(m1, m2, m3)
    kkt = max(_kkt_spread(g1, m1), _kkt_spread(g2, m2, cap2),
              _kkt_spread(g3, m3))
    if kkt > kkt_tol:
        raise NoConvergence(
            "cell solver stopped at KKT spread %.3g after %d iterations "
            "(tolerance %.3g)" % (kkt, it, kkt_tol))
    info = {"iterations": it, "kkt_spread": kkt, "polished": polished_ok,
            "energy_trace": np.asarray(energy_trace)}
    return m1, m2, m3, info


def _newton_polish(grids: _HalfGrids, m1, m2, m3):
    """Solve the equality-constrained quadratic problem exactly on the
    active set guessed from the current iterate.  Returns refreshed
    masses, or None if the guess is infeasible."""
    band = 1e-9
    cap2 = grids.cap2
    f1 = m1 > band
    f2 = (m2 > band) & (m2 < cap2 - band)
    sat = m2 >= cap2 - band
    f3 = m3 > band
    i1 = np.nonzero(f1)[0]
    i2 = np.nonzero(f2)[0]
    i3 = np.nonzero(f3)[0]
    if len(i1) == 0 or len(i2) == 0 or len(i3) == 0:
        return None
    nf = len(i1) + len(i2) + len(i3)
    H = np.zeros((nf + 3, nf + 3))
    s1 = slice(0, len(i1))
    s2 = slice(len(i1), len(i1) + len(i2))
    s3 = slice(len(i1) + len(i2), nf)
    H[s1, s1] = 2 * grids.A11[np.ix_(i1, i1)]
    H[s2, s2] = 2 * grids.A22[np.ix_(i2, i2)]
    H[s3, s3] = 2 * grids.A33[np.ix_(i3, i3)]
    H[s1, s2] = -grids.A12[np.ix_(i1, i2)]
    H[s2, s1] = H[s1, s2].T
    H[s3, s2] = -grids.A32[np.ix_(i3, i2)]
    H[s2, s3] = H[s3, s2].T
    rhs = np.zeros(nf + 3)
    msat = np.zeros(len(grids.c2))
    msat[sat] = cap2[sat]
    rhs[s1] = -(grids.q1[i1] - grids.A12[np.ix_(i1, np.nonzero(sat)[0])]
                @ cap2[sat])
    rhs[s2] = -(2 * grids.A22[np.ix_(i2, np.nonzero(sat)[0])] @ cap2[sat])
    rhs[s3] = -(- grids.A32[np.ix_(i3, np.nonzero(sat)[0])] @ cap2[sat])
    # mass constraints (half masses): sums = 1/2, 1/3 - saturated, 1/6
    for row, (sl, tot) in enumerate(
            [(s1, 0.5), (s2, 1.0 / 3.0 - cap2[sat].sum()), (s3, 1.0 / 6.0)]):
        H[nf + row, sl] = 1.0
        H[sl, nf + row] = -1.0
        rhs[nf + row] = tot
    try:
        sol = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        return None
    x1 = sol[s1]
    x2 = sol[s2]
    x3 = sol[s3]
    if (np.any(x1 < 0) or np.any(x3 < 0) or np.any(x2 < 0)
            or np.any(x2 > cap2[i2])):
        return None
    p1 = np.zeros_like(m1)
    p2 = msat.copy()
    p3 = np.zeros_like(m3)
    p1[i1] = x1
    p2[i2] = x2
    p3[i3] = x3
    return p1, p2, p3


# ----------------------------------------------------------------------
# support extraction
# ----------------------------------------------------------------------

def _support_runs(mask: np.ndarray):
    """Contiguous True runs as (start, stop) index pairs (stop inclusive)."""
    runs = []
    i = 0
    n = len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def _sqrt_edge_fit(xs, rho, edge0, side, width):
    """Fit rho(x) ~ (phi/pi) sqrt(|x - lam|) near an edge.

    side=+1 fits a right edge (support to the left of lam), side=-1 a
    left edge.  Returns (lam, phi, exponent, rms) where exponent is from
    an unconstrained power fit used for the regularity check.
    """
    sel = (np.abs(xs - edge0) < width) & (rho > 0)
    if sel.sum() < 4:
        return edge0, np.nan, np.nan, np.inf
    xs_f = xs[sel]
    rho_f = rho[sel]

    def rms_for(lam):
        u = side * (lam - xs_f)
        good = u > 0
        if good.sum() < 3:
            return np.inf, 0.0
        r = np.sqrt(u[good])
        phi = float(r @ rho_f[good] / (r @ r))
        res = rho_f[good] - phi * r
        return float(np.sqrt(np.mean(res ** 2))), phi * np.pi

    lams = np.linspace(edge0 - width / 2, edge0 + width / 2, 81)
    scores = [rms_for(l)[0] for l in lams]
    lam = lams[int(np.argmin(scores))]
    for span in (width / 8, width / 32, width / 128):
        lams = np.linspace(lam - span, lam + span, 17)
        scores = [rms_for(l)[0] for l in lams]
        lam = lams[int(np.argmin(scores))]
    rms, phi = rms_for(lam)
    # unconstrained exponent for the regularity check
    u = side * (lam - xs_f)
    good = u > 1e-12
    p = np.polyfit(np.log(u[good]), np.log(rho_f[good]), 1)[0] \
        if good.sum() >= 3 else np.nan
    return float(lam), float(phi), float(p), rms


# ----------------------------------------------------------------------
# solution container and the driver
# ----------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class EquilibriumSolution:
    """Minimizer data.  lambdas are all 2g+2 endpoints in increasing
    order; alpha has length g (alpha_k = mu1 mass strictly right of gap
    k, so alpha_0 = 1 and alpha_{g+1} = 0 are implied); psi holds the
    analytic density prefactors per cut; spectral is the refined payload
    (None when refinement was disabled)."""
    cfg: ModelConfig
    measures: tuple
    lambdas: np.ndarray
    genus: int
    c: float
    alpha: np.ndarray
    l: float
    phi: np.ndarray
    energy: float
    rho1: Callable
    psi: tuple
    diagnostics: dict
    spectral: object

    def cuts(self):
        lam = self.lambdas
        return [(lam[2 * j], lam[2 * j + 1]) for j in range(self.genus + 1)]

    def gaps(self):
        lam = self.lambdas
        return [(lam[2 * j + 1], lam[2 * j + 2]) for j in range(self.genus)]


def solve_equilibrium(cfg: ModelConfig,
                      grid_spec: Optional[GridSpec] = None
                      ) -> EquilibriumSolution:
    """Minimize the three-measure energy and extract the support data.

    Runs the cell solver on symmetric half grids (doubling the axis
    range until the endpoints and the saturation point stop moving),
    extracts endpoints by thresholding + square-root edge fits, then
    refines geometry and densities with the spectral stage.
    """
    spec = grid_spec or GridSpec()
    x1 = spec.x1 or _auto_x1(cfg)
    n1 = spec.n1 or max(600, int(round(x1 / 0.006)))

    # range-doubling rounds at a loose tolerance to settle the axis
    # truncation, warm-starting each round from the previous masses
    loose_tol = max(spec.kkt_tol, 1e-4)
    prev_geo = None
    x23 = spec.x23
    history = []
    warm = None
    for round_idx in range(spec.doublings + 1):
        n23 = int(round(x23 * spec.n2_per_unit))
        grids = _HalfGrids(cfg, n1, x1, n23, x23, n23, x23)
        if warm is not None:
            pad2 = np.zeros(n23 - len(warm[1]))
            warm = (warm[0], np.concatenate([warm[1], pad2]),
                    np.concatenate([warm[2], pad2]))
        m1, m2, m3, info = _fista(grids, spec.max_iter, loose_tol,
                                  init=warm, do_polish=False)
        warm = (m1, m2, m3)
        geo = _extract_geometry(cfg, grids, m1, m2)
        history.append({"x23": x23, "lambdas": geo["lambdas"],
                        "c": geo["c"], "kkt": info["kkt_spread"]})
        if prev_geo is not None:
            shift = max(
                float(np.max(np.abs(geo["lambdas"] - prev_geo["lambdas"])))
                if len(geo["lambdas"]) == len(prev_geo["lambdas"]) else np.inf,
                abs(geo["c"] - prev_geo["c"]))
            if shift < 5e-4:
                break
        prev_geo = geo
        if round_idx < spec.doublings:
            x23 *= 2.0

    if geo["lambdas"][-1] > 0.8 * x1:
        raise NoConvergence(
            "first-measure support reaches the grid boundary; enlarge x1")

    # genus tie-break: a gap narrower than 4 cells is not trusted; rerun
    # once at doubled nu1 resolution before declaring the topology
    if geo.get("narrow_gap") and n1 < 6000:
        n1 *= 2
        grids = _HalfGrids(cfg, n1, x1, n23, x23, n23, x23)
        m1, m2, m3, info = _fista(grids, spec.max_iter, loose_tol,
                                  do_polish=False)
        geo = _extract_geometry(cfg, grids, m1, m2)
        if geo.get("narrow_gap"):
            raise NonRegularPotential(
                "support gap stays below 4 cells after refinement; "
                "the potential sits too close to a cut birth/merge")
        warm = (m1, m2, m3)

    # final pass on the settled grids at the full tolerance, with the
    # active-set Newton polish enabled
    m1, m2, m3, info = _fista(grids, spec.max_iter, spec.kkt_tol,
                              init=warm, do_polish=True)
    geo = _extract_geometry(cfg, grids, m1, m2)

    v1 = _half_to_full("real", grids.c1, grids.h1, m1, "nu1")
    v2 = _half_to_full("imag", grids.c2, grids.h2, m2, "nu2")
    v3 = _half_to_full("real", grids.c3, grids.h3, m3, "nu3")
    e_val = energy(v1, v2, v3, cfg)

    g1, _, _ = grids.grads(m1, m2, m3)
    supp = m1 > _OFF_SUPPORT_MASS
    # half-vector gradients are twice the full-convention variation
    l_cell = float(np.mean(g1[supp]) / 2.0)

    lambdas = geo["lambdas"]
    genus = len(lambdas) // 2 - 1
    spectral = None
    resid_spec = None
    if spec.refine:
        from . import eqrefine
        spectral = eqrefine.refine(cfg, lambdas, geo["c"])
        resid_spec = spectral.report
        lam_shift = float(np.max(np.abs(spectral.lambdas - lambdas)))
        if lam_shift > max(8 * grids.h1, 0.05):
            raise NoConvergence(
                "spectral refinement moved an endpoint by %.3g, beyond the "
                "cell solver's trust radius %.3g" % (lam_shift, 8 * grids.h1))
        lambdas = spectral.lambdas
        c_val = spectral.c
        l_val = spectral.l
        rho1 = spectral.rho1
        psi = spectral.psi
    else:
        c_val = geo["c"]
        l_val = l_cell
        rho1, psi = _cell_rho1(grids, m1, lambdas)

    # alpha_k = first-measure mass strictly right of gap k
    if spectral is not None:
        cm = spectral.cut_masses / spectral.cut_masses.sum()
        alpha = np.asarray([float(cm[k:].sum())
                            for k in range(1, len(cm))])
    else:
        alpha = _alphas(lambdas, rho1)

    phi = _edge_phis(lambdas, psi)
    diag = {
        "cell_info": info, "range_history": history,
        "l_cell": l_cell, "c_cell": geo["c"],
        "lambdas_cell": geo["lambdas"],
        "spectral_report": resid_spec,
        "edge_exponents": geo["edge_exponents"],
        "edge_fit_rms": geo["edge_fit_rms"],
        "x1": x1, "h1": grids.h1, "h2": grids.h2,
    }
    sol = EquilibriumSolution(
        cfg=cfg, measures=(v1, v2, v3), lambdas=np.asarray(lambdas),
        genus=genus, c=float(c_val), alpha=alpha, l=float(l_val),
        phi=phi, energy=float(e_val), rho1=rho1, psi=psi,
        diagnostics=diag, spectral=spectral)
    _regularity_checks(sol)
    return sol


def _extract_geometry(cfg, grids, m1, m2):
    """Threshold + square-root fits on the cell masses: endpoints of the
    nu1 support and the saturation point c."""
    supp = m1 > _OFF_SUPPORT_MASS
    runs = _support_runs(supp)
    if not runs:
        raise NoConvergence("nu1 support is empty at the cell level")
    # discard droplets below 4 cells (spurious); track narrow gaps
    runs = [r for r in runs if r[1] - r[0] >= 3]
    narrow_gap = False
    for (a0, a1), (b0, b1) in zip(runs[:-1], runs[1:]):
        if b0 - a1 - 1 < 4:
            narrow_gap = True
    rho = m1 / grids.h1
    xs = grids.c1
    lambdas_pos = []
    exps = []
    rmss = []
    # positive-side endpoints: each run [lo, hi] on the half grid maps to
    # edges; a run touching cell 0 continues through the origin.
    for (lo, hi) in runs:
        right0 = xs[hi] + grids.h1 / 2
        wid = max(10 * grids.h1, 0.02 * max(1.0, right0))
        lam_r, phi_r, p_r, rms_r = _sqrt_edge_fit(xs, rho, right0, +1, wid)
        lambdas_pos.append(lam_r)
        exps.append(p_r)
        rmss.append(rms_r)
        if lo > 0:  # interior left edge at positive x
            left0 = xs[lo] - grids.h1 / 2
            lam_l, phi_l, p_l, rms_l = _sqrt_edge_fit(xs, rho, left0, -1, wid)
            lambdas_pos.append(lam_l)
            exps.append(p_l)
            rmss.append(rms_l)
    lambdas_pos = np.sort(np.asarray(lambdas_pos))
    lambdas = np.concatenate([-lambdas_pos[::-1], lambdas_pos])
    # saturation point: first half cell where the deficit leaves zero
    deficit = grids.cap2 - m2
    sat = deficit <= 1e-10
    ts = grids.c2
    if sat.any():
        c0 = ts[np.nonzero(sat)[0][-1]] + grids.h2 / 2
        # refine by square-root fit of the deficit density just beyond c
        dd = deficit / grids.h2
        wid = max(10 * grids.h2, 0.1 * c0)
        c_fit, _, _, _ = _sqrt_edge_fit(ts, dd, c0, -1, wid)
    else:
        c_fit = 0.0
    return {"lambdas": lambdas, "c": float(c_fit), "narrow_gap": narrow_gap,
            "edge_exponents": np.asarray(exps), "edge_fit_rms":
            np.asarray(rmss)}


def _cell_rho1(grids, m1, lambdas):
    """Fallback density callable (linear interpolation of cell densities)
    with crude per-cut prefactors, used when refinement is off."""
    xs_full = np.concatenate([-grids.c1[::-1], grids.c1])
    rho_full = np.concatenate([m1[::-1], m1]) / grids.h1

    def rho1(x):
        x = np.asarray(x, dtype=float)
        return np.interp(x, xs_full, rho_full, left=0.0, right=0.0)

    psi = []
    lam = np.asarray(lambdas)
    for j in range(len(lam) // 2):
        a, b = lam[2 * j], lam[2 * j + 1]

        def make(a=a, b=b):
            def psi_j(x):
                x = np.asarray(x, dtype=float)
                w = np.sqrt(np.maximum((b - x) * (x - a), 1e-30))
                return rho1(x) / w
            return psi_j
        psi.append(make())
    return rho1, tuple(psi)


def _alphas(lambdas, rho1):
    """alpha_k = mu1 mass of the union of cuts strictly right of gap k,
    k = 1..g, computed by quadrature of the density."""
    from .quadrature import adaptive_quad
    lam = np.asarray(lambdas)
    g = len(lam) // 2 - 1
    cut_mass = []
    for j in range(g + 1):
        a, b = lam[2 * j], lam[2 * j + 1]
        val = adaptive_quad(lambda x: rho1(x), a, b, tol=1e-11)
        cut_mass.append(float(val))
    total = sum(cut_mass)
    if total > 0:
        cut_mass = [m / total for m in cut_mass]  # unit total by definition
    alpha = []
    for k in range(1, g + 1):
        alpha.append(sum(cut_mass[k:]))
    return np.asarray(alpha)


def _edge_phis(lambdas, psi):
    """phi_j = pi * rho1 / sqrt|x - lambda_j| limit at every endpoint,
    evaluated through the analytic prefactors."""
    lam = np.asarray(lambdas)
    out = []
    for j in range(len(lam)):
        cut = j // 2
        a, b = lam[2 * cut], lam[2 * cut + 1]
        other = b - a
        val = psi[cut](np.array([lam[j]]))[0] * np.sqrt(other)
        out.append(np.pi * val)
    return np.asarray(out)


def _regularity_checks(sol: EquilibriumSolution):
    """Interior density zeros and edge exponents; raises
    NonRegularPotential on failure."""
    for (a, b), ps in zip(sol.cuts(), sol.psi):
        xs = np.linspace(a, b, 201)[1:-1]
        vals = ps(xs)
        if np.min(vals) < 1e-10 * np.max(vals):
            raise NonRegularPotential(
                "density prefactor nearly vanishes inside a cut "
                "(min/max = %.3g)" % (np.min(vals) / np.max(vals)))
    expo = sol.diagnostics.get("edge_exponents")
    if expo is not None and len(expo):
        bad = np.abs(np.asarray(expo) - 0.5) > 0.15
        if np.any(bad & np.isfinite(np.asarray(expo))):
            raise NonRegularPotential(
                "cell-level edge exponent deviates from 1/2: %s"
                % np.round(np.asarray(expo), 3))


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------

def variational_report(sol: EquilibriumSolution, cfg: ModelConfig) -> dict:
    """Equality/inequality residuals of the first-measure condition.

    r(x) = 2 U^{mu1}(x) - U^{mu2}(x) + V(x) - (3/4) tau^{4/3}|x|^{4/3} - l
    evaluated with the *cell* measures on the cell test grid (the
    discrete self-consistency residual), plus the spectral-stage
    residuals when available, plus KKT spreads for the second and third
    measures (their optimality has no single-measure equality form in
    the continuum; the discrete KKT conditions are the operative test).
    """
    v1, v2, v3 = sol.measures
    x = v1.centers
    m = v1.masses
    h = v1.h
    d = np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(d, 1.0)
    u1 = (-np.log(d)) @ m + (1.5 - np.log(h)) * m
    u2 = (-0.5 * np.log(x[:, None] ** 2 + v2.centers[None, :] ** 2)
          ) @ v2.masses
    r_nol = 2 * u1 - u2 + external_field(cfg, x)
    supp = m > _OFF_SUPPORT_MASS
    l_cell = float(np.mean(r_nol[supp]))
    r = r_nol - sol.l
    r_consist = r_nol - l_cell
    out = {
        "l_cell": l_cell,
        "max_equality_residual": float(np.max(np.abs(r_consist[supp]))),
        "min_inequality_margin": float(np.min(r_consist[~supp]))
        if np.any(~supp) else np.inf,
        "parity_residual": float(np.max(np.abs(r - r[::-1]))),
    }
    # KKT spreads for nu2 / nu3 at the cell level
    t2 = v2.centers
    self2 = -np.log(np.maximum(np.abs(t2[:, None] - t2[None, :]), 1e-300))
    np.fill_diagonal(self2, 1.5 - np.log(v2.h))
    u22 = self2 @ v2.masses
    u12 = (-0.5 * np.log(v2.centers[:, None] ** 2 + x[None, :] ** 2)) @ m
    u32 = (-0.5 * np.log(v2.centers[:, None] ** 2
                         + v3.centers[None, :] ** 2)) @ v3.masses
    g2 = 2 * u22 - u12 - u32
    cap = sigma_interval_mass(cfg, np.abs(t2) - v2.h / 2,
                              np.abs(t2) + v2.h / 2)
    out["kkt_spread_nu2"] = _kkt_spread(g2, v2.masses, cap,
                                        act_tol=1e-11)
    x3 = v3.centers
    self3 = -np.log(np.maximum(np.abs(x3[:, None] - x3[None, :]), 1e-300))
    np.fill_diagonal(self3, 1.5 - np.log(v3.h))
    u33 = self3 @ v3.masses
    u23 = (-0.5 * np.log(x3[:, None] ** 2 + t2[None, :] ** 2)) @ v2.masses
    g3 = 2 * u33 - u23
    out["kkt_spread_nu3"] = _kkt_spread(g3, v3.masses, act_tol=1e-11)
    if sol.spectral is not None:
        out["spectral"] = dict(sol.spectral.report)
    return out


def edge_constants(sol: EquilibriumSolution) -> np.ndarray:
    """phi_j from least-squares square-root fits of rho1 near each
    endpoint; raises NonRegularPotential when a fitted exponent strays
    from 1/2 by more than 0.05."""
    lam = sol.lambdas
    phis = []
    for j, edge in enumerate(lam):
        cut = j // 2
        a, b = lam[2 * cut], lam[2 * cut + 1]
        wid = 0.02 * (b - a)
        side = +1 if j % 2 else -1   # odd index = right edge of its cut
        # sample strictly inside the cut
        if side > 0:
            xs = np.linspace(edge - wid, edge - wid * 1e-3, 160)
        else:
            xs = np.linspace(edge + wid * 1e-3, edge + wid, 160)
        rho = np.asarray(sol.rho1(xs))
        u = np.abs(edge - xs)
        good = rho > 0
        p, logc = np.polyfit(np.log(u[good]), np.log(rho[good]), 1)
        if abs(p - 0.5) > 0.05:
            raise NonRegularPotential(
                "edge exponent %.4f at lambda_%d deviates from 1/2"
                % (p, j + 1))
        r = np.sqrt(u[good])
        phi = float(r @ rho[good] / (r @ r)) * np.pi
        phis.append(phi)
    return np.asarray(phis)


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------

def solution_to_json(sol: EquilibriumSolution) -> str:
    data = {
        "lambda": [float(v) for v in sol.lambdas],
        "c": sol.c,
        "g": sol.genus,
        "alpha": [float(v) for v in sol.alpha],
        "l": sol.l,
        "phi": [float(v) for v in sol.phi],
    }
    return json.dumps(data, indent=2, sort_keys=True)


def write_density_csv(sol: EquilibriumSolution, out_dir: str) -> list:
    """Write (x, rho1), (t, rho_sigma_minus_mu2), (x, rho3) tables.
    Returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    lam = sol.lambdas
    xs = []
    for (a, b) in sol.cuts():
        xs.append(np.linspace(a, b, 401))
    xs = np.concatenate(xs)
    rho1 = np.asarray(sol.rho1(xs))
    p = os.path.join(out_dir, "rho1.csv")
    _write_csv(p, "x,rho1", "first measure density on its cuts",
               np.column_stack([xs, rho1]))
    paths.append(p)
    if sol.spectral is not None:
        ts = sol.c * (1.0 + np.linspace(0.0, 4.0, 401) ** 2)
        dd = np.asarray(sol.spectral.deficit_density(ts))
        tb = np.column_stack([ts, dd])
    else:
        v2 = sol.measures[1]
        pos = v2.centers > 0
        cap = sigma_interval_mass(sol.cfg, v2.centers[pos] - v2.h / 2,
                                  v2.centers[pos] + v2.h / 2)
        tb = np.column_stack([v2.centers[pos],
                              (cap - v2.masses[pos]) / v2.h])
    p = os.path.join(out_dir, "rho_sigma_minus_mu2.csv")
    _write_csv(p, "t,rho_sigma_minus_mu2",
               "deficit density on the imaginary axis (arclength t)", tb)
    paths.append(p)
    if sol.spectral is not None:
        xs3 = np.linspace(0.0, 6.0 * max(1.0, sol.lambdas[-1]), 601)
        rho3 = np.asarray(sol.spectral.mu3_density(xs3))
        tb = np.column_stack([xs3, rho3])
    else:
        v3 = sol.measures[2]
        pos = v3.centers > 0
        tb = np.column_stack([v3.centers[pos], v3.masses[pos] / v3.h])
    p = os.path.join(out_dir, "rho3.csv")
    _write_csv(p, "x,rho3", "third measure density (even in x)", tb)
    paths.append(p)
    return paths


def _write_csv(path, header_cols, description, table):
    with open(path, "w") as fh:
        fh.write("# %s\n" % description)
        fh.write(header_cols + "\n")
        for row in table:
            fh.write(",".join("%.16e" % v for v in row) + "\n")
