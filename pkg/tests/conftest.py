import pytest

from twomat.config import ModelConfig
from twomat.biortho import build_biortho

# the two benchmark potentials used throughout the suite
V2 = (0.0, 0.0, 0.5)                    # x^2/2
V4 = (0.0, 0.0, -1.5, 0.0, 0.25)        # x^4/4 - 3x^2/2

_BUILDS = {}
_EQUILIBRIA = {}


@pytest.fixture(scope="session")
def built():
    """Memoized build_biortho: the larger systems take seconds to build
    and several tests share them."""
    def get(vc, n, **kw):
        key = (vc, n, tuple(sorted(kw.items())))
        if key not in _BUILDS:
            cfg = ModelConfig(v_coeffs=vc, tau=1.0, n=n)
            _BUILDS[key] = build_biortho(cfg, **kw)
        return _BUILDS[key]
    return get


@pytest.fixture(scope="session")
def equilibria():
    """Memoized solve_equilibrium keyed by the potential coefficients.
    A full solve takes about a minute; the equilibrium, surface and
    acceptance tests all reuse the same three benchmark solutions."""
    from twomat.equilibrium import solve_equilibrium

    def get(vc, tau=1.0):
        key = (tuple(vc), tau)
        if key not in _EQUILIBRIA:
            cfg = ModelConfig(v_coeffs=tuple(vc), tau=tau, n=6)
            _EQUILIBRIA[key] = solve_equilibrium(cfg)
        return _EQUILIBRIA[key]
    return get
