"""Parameter schedule and admissibility gates.

All gate arithmetic is exact (``fractions.Fraction``); the frequency
sequence ``lambda_q = ceil(lambda0 ** (b ** q))`` is computed as an exact
integer ceiling and never under-approximated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from functools import lru_cache

import mpmath

# lambda_q must stay an exactly representable float64 integer
MAX_LAMBDA = 2 ** 53


class ScheduleError(ValueError):
    """Raised when a schedule quantity is undefined or breaks monotonicity."""


class ScheduleOverflow(ScheduleError):
    def __init__(self, q: int, max_q: int):
        super().__init__(f"lambda_{q} exceeds {MAX_LAMBDA}; max usable q is {max_q}")
        self.q = q
        self.max_q = max_q


def as_fraction(x) -> Fraction:
    """Convert ints, strings ('5/4', '1.001') and floats to an exact Fraction.

    Floats go through their shortest decimal repr so ``1.001`` means 1001/1000.
    """
    if isinstance(x, Fraction):
        return x
    if isinstance(x, bool):
        raise TypeError("boolean is not a rational")
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ValueError(f"non-finite value {x!r}")
        return Fraction(repr(x))
    if isinstance(x, str):
        return Fraction(x.strip())
    raise TypeError(f"cannot interpret {x!r} as a rational")


@dataclass(frozen=True)
class ParamConfig:
    lambda0: int = 16
    b: Fraction = Fraction(5, 4)
    beta: Fraction = Fraction(4, 5)
    gamma: Fraction = Fraction(0)
    alpha: Fraction = Fraction(-1, 2)
    zeta: Fraction = Fraction(1, 10)
    L: int = 2
    M_const: Fraction = Fraction(4)
    c0: Fraction = Fraction(1, 100)
    c1: Fraction = Fraction(1, 100)
    C_lift: Fraction = Fraction(10)
    K_lift: Fraction = Fraction(10)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("lambda0", "L"):
                fv = as_fraction(v)
                if fv.denominator != 1:
                    raise ValueError(f"{f.name} must be an integer, got {v!r}")
                object.__setattr__(self, f.name, int(fv))
            else:
                object.__setattr__(self, f.name, as_fraction(v))
        if self.lambda0 < 2:
            raise ValueError("lambda0 must be >= 2")
        if self.b <= 1:
            raise ValueError("b must exceed 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.L < 2:
            raise ValueError("L must be >= 2")
        if self.M_const < 4:
            raise ValueError("M_const must be >= 4")
        for name in ("c0", "c1", "C_lift", "K_lift"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def replace(self, **kw) -> "ParamConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return ParamConfig(**d)


def _perfect_power(n: int) -> tuple[int, int]:
    """(r, j) with n = r**j and j maximal."""
    for j in range(max(1, n.bit_length()), 1, -1):
        r = int(round(n ** (1.0 / j)))
        for c in (r - 1, r, r + 1):
            if c > 1 and c ** j == n:
                return c, j
    return n, 1


def _ceil_power(base: int, e: Fraction) -> int:
    """Exact ceil(base ** e) for a positive rational exponent e.

    With base = r**j and r not a perfect power, r**(j e) is an integer iff
    j e is; otherwise it is irrational and its floor is settled by raising the
    working precision until the distance to the nearest integer exceeds the
    rounding error.
    """
    r, j = _perfect_power(base)
    f = j * Fraction(e)
    if f * math.log2(r) > 60:
        raise OverflowError
    if f.denominator == 1:
        return r ** f.numerator
    prec = 128
    while True:
        with mpmath.workprec(prec):
            x = mpmath.power(mpmath.mpf(r), mpmath.mpf(f.numerator) / f.denominator)
            fl = mpmath.floor(x)
            gap = min(x - fl, fl + 1 - x)
            if gap > mpmath.ldexp(x, 16 - prec):
                return int(fl) + 1
        prec *= 2


class Schedule:
    """Frequency, amplitude and time-scale sequence for a ParamConfig.

    Indices below zero clamp to zero.
    """

    def __init__(self, config: ParamConfig):
        self.config = config
        self._lam: dict[int, int] = {}

    def _clamp(self, q: int) -> int:
        return max(int(q), 0)

    def lam(self, q: int) -> int:
        q = self._clamp(q)
        if q not in self._lam:
            c = self.config
            try:
                v = _ceil_power(c.lambda0, c.b ** q)
            except OverflowError:
                v = MAX_LAMBDA + 1
            if v > MAX_LAMBDA:
                raise ScheduleOverflow(q, self.max_q())
            if q > 0 and v <= self.lam(q - 1):
                raise ScheduleError(
                    f"lambda_{q}={v} does not exceed lambda_{q - 1}={self.lam(q - 1)}")
            self._lam[q] = v
        return self._lam[q]

    def max_q(self) -> int:
        q = 0
        c = self.config
        while True:
            try:
                v = _ceil_power(c.lambda0, c.b ** (q + 1))
            except OverflowError:
                return q
            if v > MAX_LAMBDA:
                return q
            q += 1

    def _mp_delta(self, q):
        return mpmath.power(mpmath.mpf(self.lam(q)), -_mpq(self.config.beta))

    def delta(self, q: int) -> float:
        with mpmath.workdps(40):
            return float(self._mp_delta(q))

    def tau(self, q: int) -> float:
        return time_scale(q, self)

    def l_moll(self, q: int) -> float:
        c = self.config
        with mpmath.workdps(40):
            ratio = mpmath.mpf(self.lam(q + 1)) / self.lam(q)
            v = _mpq(c.c0) * ratio ** (-mpmath.mpf(3) / (2 * c.L)) / self.lam(q)
            return float(v)

    def tau_moll(self, q: int) -> float:
        """Temporal mollification length (flow-averaging window half-width)."""
        c = self.config
        with mpmath.workdps(40):
            ratio = mpmath.mpf(self.lam(q + 1)) / self.lam(q)
            v = (_mpq(c.c0) * ratio ** mpmath.mpf(-1.5) * mpmath.mpf(self.lam(q)) ** mpmath.mpf(-1.5)
                 * self._mp_delta(q) ** mpmath.mpf(-0.5))
            return float(v)

    def transport_scale(self, q: int) -> float:
        """Inverse of lambda_q^{3/2} delta_{q-1}^{1/2}: the coarse advective time."""
        with mpmath.workdps(40):
            v = 1 / (mpmath.mpf(self.lam(q)) ** mpmath.mpf(1.5) * mpmath.sqrt(self._mp_delta(q - 1)))
            return float(v)


def _mpq(x: Fraction):
    return mpmath.mpf(x.numerator) / x.denominator


def build_schedule(config: ParamConfig) -> Schedule:
    s = Schedule(config)
    s.lam(0)
    return s


def time_scale(q: int, schedule: Schedule) -> float:
    """Lagged time scale for the stage q -> q+1.

    delta_{q-2}^{-1/4} delta_q^{-1/4} lambda_{q-1}^{-3/4} lambda_{q+1}^{-3/4}
    """
    s = schedule
    with mpmath.workdps(40):
        v = (s._mp_delta(q - 2) ** mpmath.mpf(-0.25) * s._mp_delta(q) ** mpmath.mpf(-0.25)
             * mpmath.mpf(s.lam(q - 1)) ** mpmath.mpf(-0.75)
             * mpmath.mpf(s.lam(q + 1)) ** mpmath.mpf(-0.75))
        return float(v)


# ----------------------------------------------------------------------------
# admissibility


@dataclass(frozen=True)
class Inequality:
    name: str
    lhs_expr: str
    rhs_expr: str
    lhs: Fraction
    rhs: Fraction
    strict: bool = True
    gating: bool = True

    @property
    def satisfied(self) -> bool:
        return self.lhs < self.rhs if self.strict else self.lhs <= self.rhs


@dataclass(frozen=True)
class AdmissibilityReport:
    config: ParamConfig
    records: tuple[Inequality, ...]
    alpha_theta_max: Fraction
    alpha_inv_max: Fraction
    zeta_max: Fraction
    notes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def verdict(self) -> bool:
        return all(r.satisfied for r in self.records if r.gating)

    def failing(self) -> list[str]:
        return [r.name for r in self.records if r.gating and not r.satisfied]

    def record(self, name: str) -> Inequality:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)


def forced_thresholds(b: Fraction) -> tuple[Fraction, Fraction]:
    b = as_fraction(b)
    return (3 * b * (b + 1) / (4 * b * b + b + 1),
            3 * b * (b + 1) / (2 * b * b + b + 1))


def unforced_thresholds(b: Fraction) -> tuple[Fraction, Fraction]:
    b = as_fraction(b)
    return 3 * b / (4 * b + 1), 3 / (1 + (b + 1) / b)


def dissipation_threshold(b: Fraction, gamma: Fraction) -> Fraction:
    b, gamma = as_fraction(b), as_fraction(gamma)
    return (b - 2 * b * (gamma - 1)) / (2 * b - 1)


def temporal_threshold(b: Fraction, beta: Fraction) -> Fraction:
    b, beta = as_fraction(b), as_fraction(beta)
    return beta / (2 * b + 1 - beta / b)


def check_admissibility(config: ParamConfig) -> AdmissibilityReport:
    c = config
    b, beta, gamma, alpha, zeta = c.b, c.beta, c.gamma, c.alpha, c.zeta
    f1, f2 = forced_thresholds(b)
    u1, u2 = unforced_thresholds(b)
    a_inv_max = Fraction(1, 2) + beta / (2 * b)
    a_theta_max = a_inv_max - 1
    zmax = temporal_threshold(b, beta)
    recs = [
        Inequality("forced_1", "beta", "3b(b+1)/(4b^2+b+1)", beta, f1),
        Inequality("forced_2", "beta", "3b(b+1)/(2b^2+b+1)", beta, f2),
        Inequality("dissipation", "beta", "(b-2b(gamma-1))/(2b-1)", beta,
                   dissipation_threshold(b, gamma)),
        Inequality("mollification", "beta", "3/2", beta, Fraction(3, 2)),
        Inequality("regularity", "alpha+1", "1/2+beta/(2b)", alpha + 1, a_inv_max),
        Inequality("temporal", "zeta", "beta/(2b+1-beta/b)", zeta, zmax),
        Inequality("gamma_lower", "0", "gamma", Fraction(0), gamma, strict=False),
        Inequality("gamma_upper", "gamma", "1-alpha", gamma, 1 - alpha),
        Inequality("alpha_lower", "-1/2", "alpha", Fraction(-1, 2), alpha, strict=False),
        Inequality("alpha_upper", "alpha", "0", alpha, Fraction(0)),
        Inequality("zeta_lower", "0", "zeta", Fraction(0), zeta),
        Inequality("zeta_upper", "zeta", "1/2", zeta, Fraction(1, 2)),
        Inequality("unforced_1", "beta", "3b/(4b+1)", beta, u1, gating=False),
        Inequality("unforced_2", "beta", "3/(1+(b+1)/b)", beta, u2, gating=False),
    ]
    notes = ("alpha is the Hoelder exponent of theta; the increment bound is stated "
             "for Lambda^-1 theta, whose exponent is alpha+1",
             "unforced_* records are reported only and never gate a run")
    return AdmissibilityReport(c, tuple(recs), a_theta_max, a_inv_max, zmax, notes)


@lru_cache(maxsize=None)
def _gate_forced(b: Fraction, beta: Fraction) -> bool:
    f1, f2 = forced_thresholds(b)
    return beta < f1 and beta < f2


def forced_gate(b, beta) -> bool:
    """Both forced-scheme amplitude inequalities at (b, beta)."""
    return _gate_forced(as_fraction(b), as_fraction(beta))
