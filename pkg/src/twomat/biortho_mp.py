"""Extended-precision construction of the biorthogonal system.

Double precision cannot deliver the 1e-8 biorthogonality residual much
beyond n ~ 8: the Gram pivots h_0/h_{n-1} span 1e7..1e16 and the
normalized residual |<p_j,q_k> - h_j d_jk|/h_j is amplified by roughly
that ratio (more precisely by ||L^-1|| ||U^-T|| ||C|| / h_j, measured
~1e13 at n=12 and ~1e28 at n=24).  This module redoes the coupling
integrals, the LDU elimination, and the triangular inversions in mpmath
at a working precision that grows linearly with the degree, then hands
back float64 coefficient tables (plus the exact mp payload for the
high-precision verification oracle).

The quadrature accuracy has to sit near the working precision, so the
panel layout cannot be guessed: panels are planned in float64 from the
exponent geometry.  For an integrand e^psi * (polynomial), a Gauss rule
with m nodes on a panel where psi varies by Delta has relative error
~ exp(-m*(log(4m/Delta) - 1)) (optimize rho^-2m * e^(Delta rho^2/4)
over Bernstein ellipses), so requiring error <= e^-(L - deficit) gives
the per-panel budget

    Delta_cap = 4m * exp(-1 - max(L - deficit, 0)/m),

where deficit = psi_max - psi on the panel: panels deep under the peak
may swallow exponentially more variation.  A separate phase budget
caps the Chebyshev oscillation (deg * arccos(x/s) phase) per panel.
Everything is an even integrand in x (even V, moment parity), so the
x-integrals are folded to [0, xc] and doubled; odd (a+b) couplings
vanish identically.

The weight peaks where g(x) - n V(x) is maximal (NOT at the origin:
for double-well V the mass sits near the outer wells), with Gaussian
width 1/sqrt(n |phi''|); the planner resolves those peaks automatically
because the variation budget shrinks to Delta_cap ~ a few units there.
"""

from __future__ import annotations

import numpy as np
from mpmath import mp, mpf

from .errors import GramSingular, QuadratureNoConvergence

_GL_MP_CACHE: dict = {}


def _order_x(l_target):
    """GL order for an outer integral at accuracy target e^-l.

    Node count scales like e^(1 + l/m)/4 per unit of exponent
    variation, which keeps falling as the order m grows, until the
    panel count hits the structural floor (a few panels per peak);
    m ~ l sits near that floor.  Quantized to multiples of 8 so the
    (order, precision) rule cache stays small; the oracle adds 6 so
    its node family never coincides with the build's.
    """
    return max(48, 8 * int(np.ceil(l_target / 8)))


def _order_y(l_target):
    return max(44, 8 * int(np.ceil(0.9 * l_target / 8)))


def mp_gauss_legendre(m: int):
    """Gauss-Legendre nodes/weights on [-1,1] at current mp precision."""
    key = (m, mp.prec)
    if key in _GL_MP_CACHE:
        return _GL_MP_CACHE[key]
    seeds, _ = np.polynomial.legendre.leggauss(m)
    nodes, weights = [], []
    for s in seeds:
        x = mpf(float(s))
        for _ in range(6):  # Newton; quadratic convergence from 1e-16 seeds
            p0, p1 = mpf(1), x
            for k in range(2, m + 1):
                p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
            dp = m * (x * p1 - p0) / (x * x - 1)
            dx = p1 / dp
            x -= dx
            if abs(dx) < mpf(10) ** (-mp.dps + 2):
                break
        p0, p1 = mpf(1), x
        for k in range(2, m + 1):
            p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
        dp = m * (x * p1 - p0) / (x * x - 1)
        nodes.append(x)
        weights.append(2 / ((1 - x * x) * dp * dp))
    _GL_MP_CACHE[key] = (nodes, weights)
    return nodes, weights


def _greedy_panels(grid, psi, phase, m_nodes, l_target):
    """Merge grid cells into panels obeying the variation/phase budgets.

    grid/psi/phase: float64 arrays (psi includes any polynomial-growth
    term; phase is the cumulative Chebyshev phase deg*arccos(x/s)).
    """
    pmax = float(psi.max())
    wmax = (grid[-1] - grid[0]) / 3.0
    phase_cap = np.pi * m_nodes / 4.0
    bps = [grid[0]]
    i, last = 0, len(grid) - 1
    while i < last:
        j = i + 1
        lo = min(psi[i], psi[j])
        hi = max(psi[i], psi[j])
        while j < last:
            nlo = min(lo, psi[j + 1])
            nhi = max(hi, psi[j + 1])
            deficit = pmax - nhi
            cap = 4.0 * m_nodes * np.exp(
                -1.0 - max(l_target - deficit, 0.0) / m_nodes)
            if (nhi - nlo > cap
                    or grid[j + 1] - grid[i] > wmax
                    or abs(phase[j + 1] - phase[i]) > phase_cap):
                break
            lo, hi = nlo, nhi
            j += 1
        bps.append(grid[j])
        i = j
    if len(bps) > 600:
        raise QuadratureNoConvergence(
            "panel planner exploded (%d panels)" % (len(bps) - 1))
    return bps


def _x_plan(cfg, sx, deg, m_nodes, l_target):
    """Panels for the outer x-integral on the folded half-line [0, xc].

    Returns (breakpoints, psi_eff max, psi_eff callable); psi_eff is
    n*(g/n - V) plus the deg*arccosh growth of T_deg(x/sx) beyond the
    basis interval, so both the tail cut and the accuracy budget see
    the polynomial factor.
    """
    n, tau = cfg.n, cfg.tau

    def psi_eff(xv):
        xv = np.asarray(xv, dtype=float)
        base = n * (0.75 * (tau * xv) ** (4.0 / 3.0) - cfg.v(xv))
        return base + deg * np.arccosh(np.maximum(xv / sx, 1.0))

    xc = max(2.0 * sx, 1.0)
    for _ in range(80):
        grid = np.linspace(0.0, xc, 4097)
        psi = psi_eff(grid)
        if psi.max() - psi[-1] >= l_target + 12.0:
            break
        xc *= 1.4
    else:
        raise QuadratureNoConvergence("x tail cut not reached")
    # trim the region to the actual cut point (the seed may overshoot,
    # and tail overshoot is pure waste: the exponent out there falls so
    # fast that every spare unit costs extra panels)
    beyond = np.nonzero(psi <= psi.max() - (l_target + 12.0))[0]
    beyond = beyond[beyond > int(np.argmax(psi))]
    if beyond.size:
        grid = np.linspace(0.0, grid[beyond[0]], 4097)
        psi = psi_eff(grid)
    phase = deg * np.arccos(np.clip(grid / sx, -1.0, 1.0))
    bps = _greedy_panels(grid, psi, phase, m_nodes, l_target)
    return bps, float(psi.max()), psi_eff


def _y_plan(cfg, xv, sy, deg, m_nodes, l_target, extra_span=0.0):
    """Panels for one inner y-integral at (signed) x = xv.

    The exponent -n(y^4/4 - tau x y) - g peaks (at zero, by the choice
    of g) at y* = sign(x) (tau |x|)^(1/3) with width ~ 1/sqrt(3 n y*^2);
    the planner finds that automatically from the gridded exponent.  One
    plan is shared by all x-nodes of an outer panel: extra_span pads
    the region by the drift of y* across that panel (the budget zone
    around the peak is several sigma wide, so the shared layout stays
    accurate for the off-center peaks).
    """
    n, tau = cfg.n, cfg.tau
    g = n * 0.75 * (tau * abs(xv)) ** (4.0 / 3.0)
    ystar = np.sign(xv) * (tau * abs(xv)) ** (1.0 / 3.0)

    def psi_eff(yv):
        yv = np.asarray(yv, dtype=float)
        base = -n * (yv ** 4 / 4.0 - tau * xv * yv) - g
        return base + deg * np.arccosh(np.maximum(np.abs(yv) / sy, 1.0))

    span = max(1.0, abs(ystar), sy) + extra_span
    lo, hi = ystar - span, ystar + span
    for _ in range(80):
        grid = np.linspace(lo, hi, 2049)
        psi = psi_eff(grid)
        pm = psi.max()
        need_lo = pm - psi[0] < l_target + 12.0
        need_hi = pm - psi[-1] < l_target + 12.0
        if not (need_lo or need_hi):
            break
        if need_lo:
            lo = ystar - (ystar - lo) * 1.5
        if need_hi:
            hi = ystar + (hi - ystar) * 1.5
    else:
        raise QuadratureNoConvergence("y tail cut not reached")
    # trim overshoot on both sides (keeping the extra_span pad around
    # the peak so panel-shared plans still cover the drifting peak)
    ipk = int(np.argmax(psi))
    cut = pm - (l_target + 12.0)
    left = np.nonzero(psi[:ipk] <= cut)[0]
    right = np.nonzero(psi[ipk:] <= cut)[0]
    nlo = grid[left[-1]] - extra_span if left.size else lo
    nhi = grid[ipk + right[0]] + extra_span if right.size else hi
    if nhi - nlo < 0.6 * (hi - lo):
        grid = np.linspace(nlo, nhi, 2049)
        psi = psi_eff(grid)
    phase = deg * np.arccos(np.clip(grid / sy, -1.0, 1.0))
    return _greedy_panels(grid, psi, phase, m_nodes, l_target)


def _y_moments_mp(cfg, x_mp, g_mp, nmax, bps, order):
    """Scaled power moments mhat_0..mhat_nmax at one x >= 0, in mp.

    Base moments 0..2 by planned-panel GL on the shifted exponent, the
    rest by the integration-by-parts recursion (all terms nonnegative
    for x >= 0, so no cancellation enters the recursion).
    """
    n = cfg.n
    txa = mpf(cfg.tau) * x_mp
    nodes, weights = mp_gauss_legendre(order)
    m0 = mpf(0); m1 = mpf(0); m2 = mpf(0)
    for a, b in zip(bps[:-1], bps[1:]):
        half = (mpf(b) - mpf(a)) / 2
        mid = (mpf(b) + mpf(a)) / 2
        p0 = mpf(0); p1 = mpf(0); p2 = mpf(0)
        for t, w in zip(nodes, weights):
            y = mid + half * t
            y2 = y * y
            e = mp.exp(-n * (y2 * y2 / 4 - txa * y) - g_mp) * w
            p0 += e
            p1 += y * e
            p2 += y2 * e
        m0 += p0 * half
        m1 += p1 * half
        m2 += p2 * half
    m = [m0, m1, m2]
    for k in range(nmax - 2):
        prev = m[k - 1] if k >= 1 else mpf(0)
        m.append((k * prev + n * txa * m[k]) / n)
    return m


def _cheb_pow_mp(nmax: int, scale):
    """Power coefficients of T_b(u/scale), b = 0..nmax, as mp matrix rows."""
    rows = [[mpf(0)] * (nmax + 1) for _ in range(nmax + 1)]
    rows[0][0] = mpf(1)
    if nmax >= 1:
        rows[1][1] = 1 / mpf(scale)
    for b in range(2, nmax + 1):
        for k in range(b + 1):
            acc = -rows[b - 2][k]
            if k >= 1:
                acc += 2 * rows[b - 1][k - 1] / mpf(scale)
            rows[b][k] = acc
    return rows


def build_biortho_mp(cfg, degree=None, bits=None, scales=None):
    """Extended-precision build; returns a float64 BiorthoSystem whose
    cond_report carries the mp payload for high-precision verification."""
    from .biortho import BiorthoSystem, _x_scale, _y_scale
    from .weights import WeightTable

    nn = cfg.n if degree is None else degree
    if bits is None:
        # 30 digits of amplification headroom + 1.6 per degree, plus 10
        # digits for the Chebyshev-conversion cancellation
        bits = max(cfg.bits, int(np.ceil((30 + 1.6 * nn) * 3.33)) + 32)
    sx = float(scales[0]) if scales else _x_scale(cfg)
    sy = float(scales[1]) if scales else _y_scale(cfg)
    n, tau = cfg.n, cfg.tau
    l_target = 0.75 * bits * np.log(2.0)

    m_x = _order_x(l_target)
    x_bps, psi_max, psi_eff = _x_plan(cfg, sx, nn, m_x, l_target)

    with mp.workprec(bits):
        t_pow = _cheb_pow_mp(nn, sy)       # T_b(y/sy) in power basis
        nodes, weights = mp_gauss_legendre(m_x)
        C = [[mpf(0)] * (nn + 1) for _ in range(nn + 1)]
        tau_mp = mpf(tau)
        vrev = list(reversed([mpf(c) for c in cfg.v_coeffs]))
        for a, b in zip(x_bps[:-1], x_bps[1:]):
            # y geometry shared across this panel's nodes: accuracy from
            # the least-suppressed point, region padded by the y* drift
            xm = 0.5 * (a + b)
            pan_psi = float(np.max(psi_eff(np.array([a, xm, b]))))
            l_y = max(l_target - (psi_max - pan_psi) + 8.0, 20.0)
            m_y = _order_y(l_y)
            drift = (tau * b) ** (1.0 / 3.0) - (tau * a) ** (1.0 / 3.0)
            y_bps = _y_plan(cfg, xm, sy, 2, m_y, l_y, extra_span=drift)
            half = (mpf(b) - mpf(a)) / 2
            mid = (mpf(b) + mpf(a)) / 2
            for t, w in zip(nodes, weights):
                x = mid + half * t
                g = n * mpf(3) / 4 * (tau_mp * x) ** (mpf(4) / 3)
                mhat = _y_moments_mp(cfg, x, g, nn, y_bps, m_y)
                mch = [sum(t_pow[bb][k] * mhat[k]
                           for k in range(bb % 2, bb + 1, 2))
                       for bb in range(nn + 1)]
                # fold factor 2: even integrand on [-xc, xc]
                scale = 2 * mp.exp(g - n * mp.polyval(vrev, x)) * w * half
                xs = x / mpf(sx)
                tx = [mpf(1), xs]
                for _ in range(nn - 1):
                    tx.append(2 * xs * tx[-1] - tx[-2])
                for aa in range(nn + 1):
                    ca = tx[aa] * scale
                    row = C[aa]
                    for bb in range(aa % 2, nn + 1, 2):
                        row[bb] += ca * mch[bb]

        L = [[mpf(1) if i == j else mpf(0) for j in range(nn + 1)]
             for i in range(nn + 1)]
        U = [[mpf(1) if i == j else mpf(0) for j in range(nn + 1)]
             for i in range(nn + 1)]
        D = [mpf(0)] * (nn + 1)
        S = [row[:] for row in C]
        for k in range(nn + 1):
            piv = S[k][k]
            if piv <= 0:
                raise GramSingular(
                    "principal minor %d nonpositive at %d bits" % (k + 1, bits))
            D[k] = piv
            for i in range(k + 1, nn + 1):
                L[i][k] = S[i][k] / piv
            for j in range(k + 1, nn + 1):
                U[k][j] = S[k][j] / piv
            for i in range(k + 1, nn + 1):
                lik = L[i][k]
                if lik == 0:
                    continue
                Sk = S[k]
                Si = S[i]
                for j in range(k + 1, nn + 1):
                    Si[j] -= lik * Sk[j]

        # A = L^{-1} (unit lower), B = U^{-T} (unit lower): forward subs
        A = [[mpf(0)] * (nn + 1) for _ in range(nn + 1)]
        B = [[mpf(0)] * (nn + 1) for _ in range(nn + 1)]
        for i in range(nn + 1):
            A[i][i] = mpf(1)
            B[i][i] = mpf(1)
            for j in range(i - 1, -1, -1):
                A[i][j] = -sum(L[i][k] * A[k][j] for k in range(j, i))
                B[i][j] = -sum(U[k][i] * B[k][j] for k in range(j, i))

        lead_x = [mpf(2) ** max(k - 1, 0) / mpf(sx) ** k for k in range(nn + 1)]
        lead_y = [mpf(2) ** max(k - 1, 0) / mpf(sy) ** k for k in range(nn + 1)]
        p_rows = [[A[i][j] / lead_x[i] for j in range(nn + 1)]
                  for i in range(nn + 1)]
        q_rows = [[B[i][j] / lead_y[i] for j in range(nn + 1)]
                  for i in range(nn + 1)]
        h_mp = [D[k] / (lead_x[k] * lead_y[k]) for k in range(nn + 1)]

        payload = {"p_cheb": p_rows, "q_cheb": q_rows, "h": h_mp,
                   "bits": bits, "C": C}

    p64 = np.array([[float(v) for v in row] for row in p_rows])
    q64 = np.array([[float(v) for v in row] for row in q_rows])
    h64 = np.array([float(v) for v in h_mp])
    C64 = np.array([[float(v) for v in row] for row in C])
    if not np.all(np.isfinite(h64)) or np.any(h64 <= 0):
        raise GramSingular("norms not representable in float64 after downcast")
    cond = {"cheb_gram_cond": float(np.linalg.cond(C64)),
            "pivot_ratio": float(max(h64) / min(h64)),
            "sx": sx, "sy": sy, "escalated_bits": bits, "mp": payload}
    return BiorthoSystem(cfg=cfg, sx=sx, sy=sy, p_cheb=p64, q_cheb=q64,
                         h=h64, gram_cheb=C64, cond_report=cond,
                         _table=WeightTable(cfg, max_order=nn + 4))


def _cheb_moments_direct_mp(cfg, x_mp, g_mp, nn, sy, bps, order):
    """Mhat_b(x) = int T_b(y/sy) e^{...} dy by direct accumulation of
    the Chebyshev recurrence at the nodes (no moment recursion, no
    power-to-Chebyshev conversion); the oracle's independent y-route."""
    n = cfg.n
    txa = mpf(cfg.tau) * x_mp
    nodes, weights = mp_gauss_legendre(order)
    out = [mpf(0)] * (nn + 1)
    sy_mp = mpf(sy)
    for a, b in zip(bps[:-1], bps[1:]):
        half = (mpf(b) - mpf(a)) / 2
        mid = (mpf(b) + mpf(a)) / 2
        pan = [mpf(0)] * (nn + 1)
        for t, w in zip(nodes, weights):
            y = mid + half * t
            y2 = y * y
            e = mp.exp(-n * (y2 * y2 / 4 - txa * y) - g_mp) * w
            u = y / sy_mp
            t0, t1 = mpf(1), u
            pan[0] += e
            if nn >= 1:
                pan[1] += u * e
            for bb in range(2, nn + 1):
                t0, t1 = t1, 2 * u * t1 - t0
                pan[bb] += t1 * e
        for bb in range(nn + 1):
            out[bb] += pan[bb] * half
    return out


# ---------------------------------------------------------------------------
# kernel-side evaluation for escalated systems
#
# The downcast Chebyshev tables are fine for the Gram residual (checked in
# mp) but not for pointwise kernel work: deep inside its zero set p_j is
# exponentially smaller than its own coefficients (coefficient/value ratios
# reach ~1e14 by n = 24 -- an envelope effect, intrinsic to any global
# polynomial basis on an interval reaching past the zeros), so float64
# summation of the tables cancels to ~1e-2 relative error.  The cure is to
# cancel at working precision and downcast the *values*, which are of
# ordinary size.  The transforms Q_j, P_j get the same treatment: their
# inner integrals are re-run in mp with the panel planner, which costs a
# few ms per evaluation point and is cached per point.


def _mp_payload(sys):
    payload = sys.cond_report.get("mp")
    if payload is None:
        raise QuadratureNoConvergence("system lacks an mp payload")
    return payload


def eval_rows_mp(sys, which, vals):
    """p_j(x) (which='p') or q_j(y) (which='q') for all j, summed in mp
    from the payload rows and downcast afterwards; shape (N+1, len(vals))."""
    payload = _mp_payload(sys)
    rows = payload["p_cheb"] if which == "p" else payload["q_cheb"]
    scale = sys.sx if which == "p" else sys.sy
    nn = len(rows) - 1
    vals = np.atleast_1d(np.asarray(vals, dtype=float)).ravel()
    out = np.empty((nn + 1, vals.size))
    with mp.workprec(payload["bits"]):
        s_mp = mpf(scale)
        for i, v in enumerate(vals):
            u = mpf(float(v)) / s_mp
            t = [mpf(1)] * (nn + 1)
            if nn >= 1:
                t[1] = u
            for a in range(2, nn + 1):
                t[a] = 2 * u * t[a - 1] - t[a - 2]
            for j in range(nn + 1):
                out[j, i] = float(sum(rows[j][a] * t[a] for a in range(j + 1)))
    return out


def _transform_x_plan(cfg, yv, sx, deg, m_nodes, l_target):
    """Panels for int p(x) e^{-n(V - tau x y)} dx at one (signed) y.

    Unlike the Gram's outer integral this exponent is not even in x (the
    peak sits at V'(x) = tau*y, on the side of y), so the region grows
    from the running argmax in both directions and is trimmed back to the
    actual cut points.  Returns (breakpoints, bare exponent peak).
    """
    n, tau = cfg.n, cfg.tau

    def bare(xv):
        xv = np.asarray(xv, dtype=float)
        return -n * (cfg.v(xv) - tau * yv * xv)

    def psi_eff(xv):
        xv = np.asarray(xv, dtype=float)
        return bare(xv) + deg * np.arccosh(np.maximum(np.abs(xv) / sx, 1.0))

    span = max(2.0 * sx, 1.0)
    lo, hi = -span, span
    for _ in range(80):
        grid = np.linspace(lo, hi, 4097)
        psi = psi_eff(grid)
        pm = psi.max()
        need_lo = pm - psi[0] < l_target + 12.0
        need_hi = pm - psi[-1] < l_target + 12.0
        if not (need_lo or need_hi):
            break
        ctr = grid[int(np.argmax(psi))]
        if need_lo:
            lo = ctr - (ctr - lo) * 1.5
        if need_hi:
            hi = ctr + (hi - ctr) * 1.5
    else:
        raise QuadratureNoConvergence("transform x tail cut not reached")
    ipk = int(np.argmax(psi))
    cut = pm - (l_target + 12.0)
    left = np.nonzero(psi[:ipk] <= cut)[0]
    right = np.nonzero(psi[ipk:] <= cut)[0]
    nlo = grid[left[-1]] if left.size else lo
    nhi = grid[ipk + right[0]] if right.size else hi
    if nhi - nlo < 0.9 * (hi - lo):
        grid = np.linspace(nlo, nhi, 4097)
        psi = psi_eff(grid)
    phase = deg * np.arccos(np.clip(grid / sx, -1.0, 1.0))
    bps = _greedy_panels(grid, psi, phase, m_nodes, l_target)
    return bps, float(bare(grid).max())


def _kernel_target(sys, payload):
    """Inner-integral accuracy target for kernel evaluation.

    A kernel sum contracts the transform against p_j/h_j (or q_j), so
    its roundoff is amplified by the same norm bound that governs the
    Gram residual: max_j ||p_j||_1/h_j * max_k ||q_k||_1 * e^psi_max.
    Aim 14 digits below that (10 digits of kernel accuracy plus slack);
    cached on the system.
    """
    hit = sys.__dict__.get("_mpK_target")
    if hit is not None:
        return hit
    bits = payload["bits"]
    l_build = 0.75 * bits * np.log(2.0)
    nn = len(payload["p_cheb"]) - 1
    with mp.workprec(bits):
        pn = max(sum(abs(v) for v in row) / h
                 for row, h in zip(payload["p_cheb"], payload["h"]))
        qn = max(sum(abs(v) for v in row) for row in payload["q_cheb"])
        log_amp = float(mp.log(pn) + mp.log(qn))
    _, psi_probe, _ = _x_plan(sys.cfg, sys.sx, nn, 48, l_build)
    l_target = min(l_build, log_amp + psi_probe + 33.0)
    sys.__dict__["_mpK_target"] = l_target
    return l_target


def eval_Q_rows_mp(sys, xs):
    """Q_j(x) = e^{-nV(x)} int q_j(y) e^{-n(W - tau x y)} dy for all j,
    with the inner integral, row contraction, and prefactor in mp.
    Results are cached per x on the system."""
    payload = _mp_payload(sys)
    cfg = sys.cfg
    q_rows = payload["q_cheb"]
    nn = len(q_rows) - 1
    xs = np.atleast_1d(np.asarray(xs, dtype=float)).ravel()
    out = np.empty((nn + 1, xs.size))
    cache = sys.__dict__.setdefault("_mpQ", {})
    bits = payload["bits"]
    n = cfg.n
    l_y = _kernel_target(sys, payload)
    with mp.workprec(bits):
        m_y = _order_y(l_y)
        t_pow = sys.__dict__.get("_mpQ_tpow")
        if t_pow is None:
            t_pow = _cheb_pow_mp(nn, sys.sy)
            sys.__dict__["_mpQ_tpow"] = t_pow
        vrev = list(reversed([mpf(c) for c in cfg.v_coeffs]))
        for i, x in enumerate(xs):
            hit = cache.get(float(x))
            if hit is not None:
                out[:, i] = hit
                continue
            y_bps = _y_plan(cfg, abs(float(x)), sys.sy, nn, m_y, l_y)
            x_mp = mpf(float(x))
            g_mp = n * mpf(3) / 4 * (mpf(cfg.tau) * abs(x_mp)) ** (mpf(4) / 3)
            # power moments at |x| (recursion terms all nonnegative there),
            # reflected to signed x by m_k(-x) = (-1)^k m_k(x)
            mhat = _y_moments_mp(cfg, abs(x_mp), g_mp, nn, y_bps, m_y)
            if x < 0:
                mhat = [v if k % 2 == 0 else -v for k, v in enumerate(mhat)]
            mch = [sum(t_pow[bb][k] * mhat[k] for k in range(bb % 2, bb + 1, 2))
                   for bb in range(nn + 1)]
            pref = mp.exp(g_mp - n * mp.polyval(vrev, x_mp))
            col = np.array([
                float(pref * sum(q_rows[j][b] * mch[b] for b in range(j + 1)))
                for j in range(nn + 1)])
            cache[float(x)] = col
            out[:, i] = col
    return out


def eval_P_rows_mp(sys, ys):
    """P_j(y) = e^{-nW(y)} int p_j(x) e^{-n(V - tau x y)} dx for all j,
    inner integral and contraction in mp, cached per y."""
    payload = _mp_payload(sys)
    cfg = sys.cfg
    p_rows = payload["p_cheb"]
    nn = len(p_rows) - 1
    ys = np.atleast_1d(np.asarray(ys, dtype=float)).ravel()
    out = np.empty((nn + 1, ys.size))
    cache = sys.__dict__.setdefault("_mpP", {})
    bits = payload["bits"]
    n = cfg.n
    l_x = _kernel_target(sys, payload)
    with mp.workprec(bits):
        m_x = _order_x(l_x)
        vrev = list(reversed([mpf(c) for c in cfg.v_coeffs]))
        nodes, weights = mp_gauss_legendre(m_x)
        sx_mp = mpf(sys.sx)
        tau_mp = mpf(cfg.tau)
        for i, y in enumerate(ys):
            hit = cache.get(float(y))
            if hit is not None:
                out[:, i] = hit
                continue
            bps, peak = _transform_x_plan(cfg, float(y), sys.sx, nn,
                                          m_x, l_x)
            peak_mp = mpf(peak)
            y_mp = mpf(float(y))
            nch = [mpf(0)] * (nn + 1)
            for a, b in zip(bps[:-1], bps[1:]):
                half = (mpf(b) - mpf(a)) / 2
                mid = (mpf(b) + mpf(a)) / 2
                pan = [mpf(0)] * (nn + 1)
                for t, w in zip(nodes, weights):
                    x = mid + half * t
                    e = mp.exp(-n * (mp.polyval(vrev, x) - tau_mp * x * y_mp)
                               - peak_mp) * w
                    u = x / sx_mp
                    t0, t1 = mpf(1), u
                    pan[0] += e
                    if nn >= 1:
                        pan[1] += u * e
                    for aa in range(2, nn + 1):
                        t0, t1 = t1, 2 * u * t1 - t0
                        pan[aa] += t1 * e
                for aa in range(nn + 1):
                    nch[aa] += pan[aa] * half
            pref = mp.exp(peak_mp - n * y_mp ** 4 / 4)
            col = np.array([
                float(pref * sum(p_rows[j][a] * nch[a] for a in range(j + 1)))
                for j in range(nn + 1)])
            cache[float(y)] = col
            out[:, i] = col
    return out


def residual_matrix_mp(sys) -> np.ndarray:
    """Verification oracle: re-integrate <p_j, q_k> in mp with a
    different Gauss-Legendre node family (orders offset by 6 from the
    build's), its own panel layouts, and the direct (recursion-free)
    Chebyshev y-route.  Returns |<p_j,q_k> - h_j d_jk|/h_j as float64;
    odd j+k entries are identically zero by parity and reported as 0.

    The oracle does not need build-level accuracy, only enough to
    detect a 1e-8 residual with wide margin: its target is set from
    the norm bound ||p_j||_1 ||q_k||_1 e^psi_max / h_j of the very
    tables under test, plus 10 digits of detection headroom.
    """
    payload = sys.cond_report.get("mp")
    if payload is None:
        raise QuadratureNoConvergence("system lacks an mp payload")
    cfg = sys.cfg
    nn = sys.p_cheb.shape[0] - 1
    n = cfg.n
    bits = payload["bits"]
    l_build = 0.75 * bits * np.log(2.0)
    with mp.workprec(bits):
        pn = max(sum(abs(v) for v in row) / h
                 for row, h in zip(payload["p_cheb"], payload["h"]))
        qn = max(sum(abs(v) for v in row) for row in payload["q_cheb"])
        log_amp = float(mp.log(pn) + mp.log(qn))
    _, psi_probe, _ = _x_plan(cfg, sys.sx, nn, 48, l_build)
    l_target = min(l_build, log_amp + psi_probe + 23.0 + 7.0)
    m_x = _order_x(l_target) + 6
    x_bps, psi_max, psi_eff = _x_plan(cfg, sys.sx, nn, m_x, l_target)
    with mp.workprec(bits):
        tau_mp = mpf(cfg.tau)
        nodes, weights = mp_gauss_legendre(m_x)
        G = [[mpf(0)] * (nn + 1) for _ in range(nn + 1)]
        p_rows = payload["p_cheb"]
        q_rows = payload["q_cheb"]
        sx_mp = mpf(sys.sx)
        vrev = list(reversed([mpf(c) for c in cfg.v_coeffs]))
        for a, b in zip(x_bps[:-1], x_bps[1:]):
            xm = 0.5 * (a + b)
            pan_psi = float(np.max(psi_eff(np.array([a, xm, b]))))
            l_y = max(l_target - (psi_max - pan_psi) + 8.0, 20.0)
            m_y = _order_y(l_y) + 6
            drift = (cfg.tau * b) ** (1.0 / 3.0) - (cfg.tau * a) ** (1.0 / 3.0)
            y_bps = _y_plan(cfg, xm, sys.sy, nn, m_y, l_y, extra_span=drift)
            half = (mpf(b) - mpf(a)) / 2
            mid = (mpf(b) + mpf(a)) / 2
            for t, w in zip(nodes, weights):
                x = mid + half * t
                g = n * mpf(3) / 4 * (tau_mp * x) ** (mpf(4) / 3)
                mch = _cheb_moments_direct_mp(cfg, x, g, nn, sys.sy,
                                              y_bps, m_y)
                qv = [sum(q_rows[j][bb] * mch[bb] for bb in range(nn + 1))
                      for j in range(nn + 1)]
                scale = 2 * mp.exp(g - n * mp.polyval(vrev, x)) * w * half
                xs = x / sx_mp
                tx = [mpf(1), xs]
                for _ in range(nn - 1):
                    tx.append(2 * xs * tx[-1] - tx[-2])
                pv = [sum(p_rows[j][aa] * tx[aa] for aa in range(nn + 1))
                      for j in range(nn + 1)]
                for j in range(nn + 1):
                    cj = pv[j] * scale
                    Gj = G[j]
                    for k in range(j % 2, nn + 1, 2):
                        Gj[k] += cj * qv[k]
        out = np.zeros((nn + 1, nn + 1))
        for j in range(nn + 1):
            for k in range(j % 2, nn + 1, 2):
                d = G[j][k] - (payload["h"][j] if j == k else mpf(0))
                out[j, k] = float(abs(d) / payload["h"][j])
    return out
