"""Model data: the even potential V, the fixed quartic W(y) = y^4/4,
the coupling tau and the matrix size n.

The two-matrix weight is exp(-n(V(x) + W(y) - tau*x*y)).  V is stored as
a full ascending-power coefficient list; odd entries must be exactly zero
(the whole analysis assumes an even model), and the leading coefficient
must be positive so the weight is integrable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import TwomatError

N_CAP = 48  # finite-n stage is only supported up to here (conditioning)


@dataclass(frozen=True)
class ModelConfig:
    v_coeffs: tuple  # ascending powers: V(x) = sum v_coeffs[k] x^k
    tau: float
    n: int
    quad_tol: float = 1e-12
    precision_bits: int | None = None

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.v_coeffs)
        object.__setattr__(self, "v_coeffs", coeffs)
        if len(coeffs) < 3:
            raise TwomatError("V must have degree >= 2")
        for k, c in enumerate(coeffs):
            if k % 2 == 1 and c != 0.0:
                raise TwomatError(
                    "V must be even: coefficient of x^%d is %g != 0" % (k, c))
        deg = len(coeffs) - 1
        while deg > 0 and coeffs[deg] == 0.0:
            deg -= 1
        if deg < 2 or deg % 2 == 1:
            raise TwomatError("V must have even degree >= 2")
        if coeffs[deg] <= 0.0:
            raise TwomatError("leading coefficient of V must be positive")
        object.__setattr__(self, "_deg", deg)
        if not (self.tau > 0):
            raise TwomatError("tau must be positive")
        if not (1 <= int(self.n) <= N_CAP):
            raise TwomatError("n must be an integer in [1, %d]" % N_CAP)
        object.__setattr__(self, "n", int(self.n))
        if not (0 < self.quad_tol <= 1e-4):
            raise TwomatError("quad_tol must lie in (0, 1e-4]")
        if self.precision_bits is not None and self.precision_bits < 53:
            raise TwomatError("precision_bits must be >= 53")

    # ---- potentials -----------------------------------------------------

    @property
    def degree(self) -> int:
        return self._deg

    @property
    def bits(self) -> int:
        """Working precision for the Gram stage (auto unless overridden)."""
        if self.precision_bits is not None:
            return self.precision_bits
        return 53 if self.n <= 24 else 128

    def v(self, x):
        return np.polynomial.polynomial.polyval(x, self.v_coeffs)

    def v_prime(self, x):
        dc = np.polynomial.polynomial.polyder(self.v_coeffs)
        return np.polynomial.polynomial.polyval(x, dc)

    @staticmethod
    def w(y):
        return np.asarray(y) ** 4 / 4.0

    @staticmethod
    def w_prime(y):
        return np.asarray(y) ** 3

    def coupling_exponent(self, x, y):
        """-n (V(x) + W(y) - tau x y), the log of the joint weight."""
        return -self.n * (self.v(x) + self.w(y) - self.tau * np.asarray(x) * np.asarray(y))

    # ---- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        d = {"v_coeffs": list(self.v_coeffs), "tau": self.tau, "n": self.n,
             "quad_tol": self.quad_tol}
        if self.precision_bits is not None:
            d["precision_bits"] = self.precision_bits
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"v_coeffs", "tau", "n", "quad_tol", "precision_bits"}
        extra = set(d) - known
        if extra:
            raise TwomatError("unknown config keys: %s" % sorted(extra))
        if "v_coeffs" not in d or "tau" not in d or "n" not in d:
            raise TwomatError("config requires v_coeffs, tau, n")
        return cls(v_coeffs=tuple(d["v_coeffs"]), tau=float(d["tau"]),
                   n=int(d["n"]), quad_tol=float(d.get("quad_tol", 1e-12)),
                   precision_bits=d.get("precision_bits"))

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def eval_potential(cfg: ModelConfig, x, derivative_order: int = 0):
    """Horner evaluation of V (order 0) or V' (order 1)."""
    if derivative_order == 0:
        return cfg.v(x)
    if derivative_order == 1:
        return cfg.v_prime(x)
    raise TwomatError("derivative_order must be 0 or 1")
