"""Adaptive Gauss-Legendre panel quadrature.

One engine serves the whole package: real integrals of vector-valued
integrands (weight transforms, Gram entries), complex contour integrals
along polyline paths (periods, Abel map, residue circles), and fixed
composite rules on prescribed breakpoints (deterministic precomputed
matrices for the equilibrium collocation stage).

Error control per panel compares a low and a high order rule; the worst
panel is bisected until the summed discrepancy is below tol relative to
the accumulated L1 size of the panel integrals (so odd integrands on
symmetric windows do not divide by zero).
"""

from __future__ import annotations

import heapq

import numpy as np

from .errors import QuadratureNoConvergence

_GL_CACHE: dict = {}


def gauss_legendre(m: int):
    """Nodes/weights on [-1, 1], cached."""
    try:
        return _GL_CACHE[m]
    except KeyError:
        x, w = np.polynomial.legendre.leggauss(m)
        _GL_CACHE[m] = (x, w)
        return x, w


def _panel_rules(f, a, b, lo, hi):
    """Evaluate f once and return (I_lo, I_hi) on panel [a, b]."""
    xl, wl = gauss_legendre(lo)
    xh, wh = gauss_legendre(hi)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = np.concatenate([mid + half * xl, mid + half * xh])
    vals = np.asarray(f(nodes))
    vlo = vals[..., :lo]
    vhi = vals[..., lo:]
    return half * (vlo @ wl), half * (vhi @ wh)


def adaptive_quad(f, a, b, tol=1e-12, abs_floor=0.0, max_panels=4096,
                  lo=15, hi=31, min_width=None, return_error=False):
    """Integrate vector-valued f over the real interval [a, b].

    f maps a node array of shape (m,) to values of shape (..., m); the
    integral is taken along the last axis.  Raises
    QuadratureNoConvergence when the panel budget or width floor is hit.
    """
    a = float(a)
    b = float(b)
    if a == b:
        probe = np.asarray(f(np.array([a])))
        z = np.zeros(probe.shape[:-1], dtype=probe.dtype)
        return (z, 0.0) if return_error else z
    if min_width is None:
        min_width = abs(b - a) * 1e-14
    i_lo, i_hi = _panel_rules(f, a, b, lo, hi)
    heap = [(-float(np.max(np.abs(i_hi - i_lo))), a, b, 0)]
    panels = {0: i_hi}
    l1 = {0: float(np.max(np.abs(i_hi)))}
    next_id = 1
    while True:
        err_total = -sum(item[0] for item in heap)
        scale = max(sum(l1.values()), abs_floor, 1e-300)
        if err_total <= tol * scale:
            break
        if len(heap) >= max_panels:
            raise QuadratureNoConvergence(
                "panel budget %d exhausted on [%g, %g] (err %.3g, need %.3g)"
                % (max_panels, a, b, err_total, tol * scale))
        neg_err, pa, pb, pid = heapq.heappop(heap)
        del panels[pid], l1[pid]
        pm = 0.5 * (pa + pb)
        if pb - pa < min_width:
            raise QuadratureNoConvergence(
                "panel width floor hit at [%g, %g]" % (pa, pb))
        for qa, qb in ((pa, pm), (pm, pb)):
            ql, qh = _panel_rules(f, qa, qb, lo, hi)
            heapq.heappush(heap, (-float(np.max(np.abs(qh - ql))), qa, qb,
                                  next_id))
            panels[next_id] = qh
            l1[next_id] = float(np.max(np.abs(qh)))
            next_id += 1
    total = sum(panels.values())
    if return_error:
        return total, err_total
    return total


def segment_quad(f, z0, z1, tol=1e-12, **kw):
    """Contour integral of f along the straight segment z0 -> z1.

    f maps complex node arrays to (..., m) values; the result includes
    the dz factor.
    """
    z0 = complex(z0)
    z1 = complex(z1)
    dz = z1 - z0

    def g(t):
        return np.asarray(f(z0 + t * dz)) * dz

    return adaptive_quad(g, 0.0, 1.0, tol=tol, **kw)


def path_quad(f, waypoints, tol=1e-12, **kw):
    """Contour integral along the polyline through waypoints."""
    pts = [complex(z) for z in waypoints]
    if len(pts) < 2:
        raise ValueError("need at least two waypoints")
    total = None
    for z0, z1 in zip(pts[:-1], pts[1:]):
        if z0 == z1:
            continue
        part = segment_quad(f, z0, z1, tol=tol, **kw)
        total = part if total is None else total + part
    return total


def fixed_quad(f, breakpoints, m=40):
    """Deterministic composite Gauss-Legendre rule on given breakpoints.

    No adaptivity: identical inputs give bit-identical results, which the
    persistence layer relies on.
    """
    x, w = gauss_legendre(m)
    bp = np.asarray(breakpoints, dtype=float)
    half = 0.5 * np.diff(bp)
    mid = 0.5 * (bp[1:] + bp[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    vals = np.asarray(f(nodes))
    return vals @ weights


def graded_breakpoints(a, b, toward, levels=30, ratio=0.5):
    """Breakpoints of [a, b] geometrically graded toward one endpoint.

    toward must equal a or b.  Used for integrands with an integrable
    singularity (log or inverse square root) at that endpoint.
    """
    if toward not in (a, b):
        raise ValueError("grade target must be an endpoint")
    length = b - a
    fr = [1.0] + [ratio ** k for k in range(1, levels)] + [0.0]
    fr = np.array(fr)
    if toward == a:
        pts = a + length * fr[::-1]
    else:
        pts = b - length * fr
    return pts
