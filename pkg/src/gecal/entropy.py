"""Generalized entropy family: generators, links, conjugates, Bregman kernel.

Each entropy is a strictly convex generator ``G`` on an open interval, with
first derivative ``g`` (the link), inverse link ``f = g^{-1}``, and convex
conjugate ``F``.  Calibration solvers only ever touch the family through
these functions, so adding an entropy means adding one branch per method.

Supported kinds and their generators:

===========  ============================================  ==========
name         G(w)                                          domain
===========  ============================================  ==========
el           -log(w)                                       (0, inf)
et           w*log(w) - w                                  (0, inf)
contrast     (w-1)*log(w-1) - w*log(w)                     (1, inf)
hd           -4*sqrt(w)                                    (0, inf)
loglog       -log(log(w))                                  (1, inf)
inverse      1/(2w)                                        (0, inf)
renyi:a      w^(a+1)/(a(a+1)),  a not in {0, -1}           (0, inf)
===========  ============================================  ==========
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DomainError",
    "LinkRangeError",
    "EntropySpec",
    "parse_entropy",
    "ENTROPY_KINDS",
]

ENTROPY_KINDS = ("el", "et", "contrast", "hd", "loglog", "inverse", "renyi")

# Open endpoints: values this close to a domain/range boundary are rejected
# instead of clamped, since clamping silently corrupts dual feasibility.
EDGE_MARGIN = 1e-12


class DomainError(ValueError):
    """Weight argument outside the open domain of the generator."""

    def __init__(self, value, interval, kind=""):
        self.value = value
        self.interval = interval
        super().__init__(
            f"value {value!r} outside open domain {interval} of entropy {kind!r}"
        )


class LinkRangeError(ValueError):
    """Dual argument outside the image of the link g; the dual point is infeasible."""

    def __init__(self, value, interval, kind=""):
        self.value = value
        self.interval = interval
        super().__init__(
            f"value {value!r} outside link range {interval} of entropy {kind!r}"
        )


def _as_array(x):
    a = np.asarray(x, dtype=float)
    return a, (a.ndim == 0)


def _ret(a, scalar):
    return float(a) if scalar else a


@dataclass(frozen=True)
class EntropySpec:
    """One member of the generalized entropy family.

    Immutable after construction; all methods are pure functions of their
    arguments and accept scalars or numpy arrays.
    """

    kind: str
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ENTROPY_KINDS:
            raise ValueError(
                f"unknown entropy kind {self.kind!r}; valid kinds: {ENTROPY_KINDS}"
            )
        if self.kind == "renyi":
            if self.alpha is None:
                raise ValueError("renyi entropy requires alpha")
            if self.alpha in (0.0, -1.0):
                raise ValueError("renyi entropy requires alpha not in {0, -1}")
        elif self.alpha is not None:
            raise ValueError(f"alpha is only meaningful for renyi, not {self.kind!r}")

    # -- metadata ----------------------------------------------------------

    @property
    def name(self) -> str:
        if self.kind == "renyi":
            return f"renyi:{self.alpha:g}"
        return self.kind

    @property
    def domain(self) -> tuple[float, float]:
        """Open interval on which G is defined."""
        if self.kind in ("contrast", "loglog"):
            return (1.0, math.inf)
        return (0.0, math.inf)

    def link_range(self) -> tuple[float, float]:
        """Open image g(domain); the feasible set for dual arguments."""
        if self.kind == "et":
            return (-math.inf, math.inf)
        if self.kind == "renyi" and self.alpha > 0:
            return (0.0, math.inf)
        return (-math.inf, 0.0)

    # -- validation --------------------------------------------------------

    def _check_domain(self, w):
        lo, hi = self.domain
        bad = ~np.isfinite(w) | (w <= lo + EDGE_MARGIN)
        if math.isfinite(hi):
            bad |= w >= hi - EDGE_MARGIN
        if np.any(bad):
            offender = float(np.ravel(w)[np.flatnonzero(np.ravel(bad))[0]])
            raise DomainError(offender, self.domain, self.name)

    def _check_link(self, nu):
        lo, hi = self.link_range()
        bad = ~np.isfinite(nu)
        if math.isfinite(lo):
            bad |= nu <= lo + EDGE_MARGIN
        if math.isfinite(hi):
            bad |= nu >= hi - EDGE_MARGIN
        if np.any(bad):
            offender = float(np.ravel(nu)[np.flatnonzero(np.ravel(bad))[0]])
            raise LinkRangeError(offender, self.link_range(), self.name)

    def contains(self, w) -> bool:
        """True if every entry of ``w`` lies strictly inside the domain."""
        try:
            self._check_domain(np.asarray(w, dtype=float))
        except DomainError:
            return False
        return True

    def link_contains(self, nu) -> bool:
        try:
            self._check_link(np.asarray(nu, dtype=float))
        except LinkRangeError:
            return False
        return True

    # -- generator and derivatives ------------------------------------------

    def g_value(self, w):
        """G(w)."""
        w, scalar = _as_array(w)
        self._check_domain(w)
        k = self.kind
        if k == "el":
            out = -np.log(w)
        elif k == "et":
            out = w * np.log(w) - w
        elif k == "contrast":
            out = (w - 1.0) * np.log(w - 1.0) - w * np.log(w)
        elif k == "hd":
            out = -4.0 * np.sqrt(w)
        elif k == "loglog":
            out = -np.log(np.log(w))
        elif k == "inverse":
            out = 0.5 / w
        else:  # renyi
            a = self.alpha
            out = w ** (a + 1.0) / (a * (a + 1.0))
        return _ret(out, scalar)

    def g_deriv(self, w):
        """g(w) = dG/dw, the link function."""
        w, scalar = _as_array(w)
        self._check_domain(w)
        k = self.kind
        if k == "el":
            out = -1.0 / w
        elif k == "et":
            out = np.log(w)
        elif k == "contrast":
            out = np.log1p(-1.0 / w)
        elif k == "hd":
            out = -2.0 / np.sqrt(w)
        elif k == "loglog":
            out = -1.0 / (w * np.log(w))
        elif k == "inverse":
            out = -0.5 / w**2
        else:
            out = w**self.alpha / self.alpha
        return _ret(out, scalar)

    def g_second(self, w):
        """g'(w) = d^2 G / dw^2, strictly positive on the domain."""
        w, scalar = _as_array(w)
        self._check_domain(w)
        k = self.kind
        if k == "el":
            out = 1.0 / w**2
        elif k == "et":
            out = 1.0 / w
        elif k == "contrast":
            out = 1.0 / (w * (w - 1.0))
        elif k == "hd":
            out = w**-1.5
        elif k == "loglog":
            lw = np.log(w)
            out = (1.0 + lw) / (w * lw) ** 2
        elif k == "inverse":
            out = 1.0 / w**3
        else:
            out = w ** (self.alpha - 1.0)
        return _ret(out, scalar)

    # -- inverse link and conjugate ------------------------------------------

    def g_inverse(self, nu):
        """f(nu) = g^{-1}(nu); closed form where available, else bracketed Newton."""
        nu, scalar = _as_array(nu)
        self._check_link(nu)
        k = self.kind
        if k == "el":
            out = -1.0 / nu
        elif k == "et":
            out = np.exp(nu)
        elif k == "contrast":
            # nu = log(1 - 1/w)  =>  w = 1 / (1 - exp(nu))
            out = 1.0 / -np.expm1(nu)
        elif k == "hd":
            out = 4.0 / nu**2
        elif k == "loglog":
            out = _loglog_inverse(nu)
        elif k == "inverse":
            out = 1.0 / np.sqrt(-2.0 * nu)
        else:
            a = self.alpha
            out = np.exp(np.log(a * nu) / a)
        return _ret(out, scalar)

    def inverse_link_deriv(self, nu):
        """f'(nu) = 1 / g'(f(nu)); the curvature weight used in dual Hessians."""
        nu, scalar = _as_array(nu)
        w = self.g_inverse(nu)
        out = 1.0 / self.g_second(w)
        return _ret(out, scalar)

    def conjugate(self, nu):
        """Convex conjugate F(nu) = -G(f(nu)) + f(nu)*nu, with F' = f."""
        nu, scalar = _as_array(nu)
        self._check_link(nu)
        k = self.kind
        if k == "el":
            out = -np.log(-nu) - 1.0
        elif k == "et":
            out = np.exp(nu)
        elif k == "contrast":
            # simplifies to nu - log(1 - exp(nu))
            out = nu - np.log(-np.expm1(nu))
        elif k == "hd":
            out = -4.0 / nu
        elif k == "inverse":
            out = -np.sqrt(-2.0 * nu)
        elif k == "renyi":
            a = self.alpha
            out = np.exp(np.log(a * nu) * (a + 1.0) / a) / (a + 1.0)
        else:  # loglog: no elementary form, evaluate the definition
            w = _loglog_inverse(nu)
            out = np.log(np.log(w)) + w * nu
        return _ret(out, scalar)

    # -- derived quantities ----------------------------------------------------

    def debias_covariate(self, pi):
        """g(1/pi) for a response probability pi in (0, 1)."""
        pi, scalar = _as_array(pi)
        bad = ~np.isfinite(pi) | (pi <= 0.0) | (pi >= 1.0)
        if np.any(bad):
            offender = float(np.ravel(pi)[np.flatnonzero(np.ravel(bad))[0]])
            raise DomainError(offender, (0.0, 1.0), f"{self.name} (pi)")
        out = self.g_deriv(1.0 / pi)
        return _ret(np.asarray(out), scalar)

    def bregman(self, w, w0):
        """Pointwise Bregman divergence D_G(w || w0) >= 0, zero iff w == w0."""
        w, s1 = _as_array(w)
        w0, s2 = _as_array(w0)
        out = self.g_value(w) - self.g_value(w0) - self.g_deriv(w0) * (w - w0)
        return _ret(np.asarray(out), s1 and s2)


def _loglog_inverse(nu):
    """Solve -1/(w log w) = nu for w > 1, elementwise.

    Equivalent to w*log(w) = c with c = -1/nu > 0.  Brackets are found by
    geometric expansion toward the boundary, then a bisection-safeguarded
    Newton iteration runs on all elements at once.  The residual tolerance
    1e-13*c keeps the relative error of the recovered link value near 1e-13.
    """
    arr = np.asarray(nu, dtype=float)
    shape = arr.shape
    c = np.atleast_1d(-1.0 / arr)

    def h(w):
        return w * np.log(w) - c

    # w*log(w) >= w-1 on (1, inf), so 1+c always sits at or above the root.
    hi = 1.0 + c
    lo = 1.0 + c / (2.0 + np.log1p(c))
    for _ in range(200):
        mask = h(lo) > 0.0
        if not np.any(mask):
            break
        lo = np.where(mask, 1.0 + (lo - 1.0) / 4.0, lo)
    w = 0.5 * (lo + hi)
    tol = 1e-13 * c
    for _ in range(200):
        val = h(w)
        done = np.abs(val) <= tol
        if np.all(done):
            break
        lo = np.where(val <= 0.0, w, lo)
        hi = np.where(val > 0.0, w, hi)
        cand = w - val / (np.log(w) + 1.0)
        inside = (cand >= lo) & (cand <= hi)
        w = np.where(done, w, np.where(inside, cand, 0.5 * (lo + hi)))
    return w.reshape(shape)


def parse_entropy(name: str) -> EntropySpec:
    """Build an EntropySpec from its config/CLI name.

    Accepted names: ``el``, ``et``, ``contrast``, ``hd``, ``loglog``,
    ``inverse``, ``renyi:<alpha>``.
    """
    text = name.strip().lower()
    if text.startswith("renyi"):
        _, _, tail = text.partition(":")
        if not tail:
            raise ValueError("renyi entropy must be written as 'renyi:<alpha>'")
        return EntropySpec("renyi", alpha=float(tail))
    if text not in ENTROPY_KINDS:
        valid = ", ".join(k for k in ENTROPY_KINDS if k != "renyi") + ", renyi:<alpha>"
        raise ValueError(f"unknown entropy {name!r}; valid kinds: {valid}")
    return EntropySpec(text)
