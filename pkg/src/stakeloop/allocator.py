"""Multi-market budget allocation for leveraged staking.

The budget is split across one exposure per market, each held at that
market's leverage cap, plus an aggregated unleveraged remainder. The
objective (instantaneous cash flow) is concave and separable, so the
optimum is characterized by a single shadow rate ``lambda_star``:

* saturated regime: every market is borrowed down to marginal value equal
  to the staking rate and the leftover budget stays unleveraged;
* unsaturated regime: the unleveraged remainder is zero and ``lambda_star``
  rises above the staking rate until the per-market responses exactly
  absorb the budget.

Responses are piecewise affine in the shadow rate, so ``lambda_star`` is
found exactly by scanning response breakpoints; a bracketed root finder
covers the brackets where liquidity caps add extra kinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

from ._roots import bracketed_root
from .errors import ConstraintError, DomainError, UnsupportedModelError
from .irm import (
    IrmParams,
    LinearIrmParams,
    MarketState,
    borrow_rate,
    marginal_cost_subgradient,
    market_response,
    response_breakpoints,
)
from .position import max_leverage_bound

SATURATED = "saturated"
UNSATURATED = "unsaturated"

_LAMBDA_TOL = 1e-12
_REL_BUDGET_TOL = 1e-9


@dataclass(frozen=True)
class ProblemInstance:
    """Markets with their leverage caps, the staking rate, and the budget."""

    markets: tuple[MarketState, ...]
    l_max: tuple[float, ...]
    staking_rate: float
    budget: float

    def __post_init__(self) -> None:
        if not self.markets:
            raise DomainError("at least one market is required")
        if len(self.markets) != len(self.l_max):
            raise DomainError("markets and l_max must have the same length")
        if self.budget <= 0.0:
            raise DomainError(f"budget must be positive, got {self.budget}")
        if not math.isfinite(self.staking_rate):
            raise DomainError(f"staking_rate must be finite, got {self.staking_rate}")
        seen: set[str] = set()
        for market, l_max in zip(self.markets, self.l_max):
            if market.market_id in seen:
                raise DomainError(f"duplicate market id {market.market_id}")
            seen.add(market.market_id)
            bound = max_leverage_bound(market.max_ltv)
            if not 1.0 < l_max <= bound:
                raise ConstraintError(
                    f"l_max={l_max} for market {market.market_id} outside "
                    f"(1, {bound:.6g}]"
                )

    @classmethod
    def uniform(
        cls,
        markets: Sequence[MarketState],
        l_max: float,
        staking_rate: float,
        budget: float,
    ) -> "ProblemInstance":
        """Same leverage cap applied to every market."""
        return cls(
            markets=tuple(markets),
            l_max=tuple(l_max for _ in markets),
            staking_rate=staking_rate,
            budget=budget,
        )

    @property
    def market_ids(self) -> tuple[str, ...]:
        return tuple(m.market_id for m in self.markets)


@dataclass(frozen=True)
class Allocation:
    """Solver output: per-market leveraged exposures plus the unleveraged rest."""

    market_ids: tuple[str, ...]
    exposures: tuple[float, ...]
    unleveraged: float
    lambda_star: float
    expected_yield: float
    regime: str

    @property
    def total(self) -> float:
        return self.unleveraged + sum(self.exposures)

    @classmethod
    def from_position(
        cls,
        market_ids: Sequence[str],
        exposures: Sequence[float],
        unleveraged: float,
    ) -> "Allocation":
        """Wrap an existing holding (not a solver result) for comparisons."""
        return cls(
            market_ids=tuple(market_ids),
            exposures=tuple(exposures),
            unleveraged=unleveraged,
            lambda_star=float("nan"),
            expected_yield=float("nan"),
            regime="position",
        )


@dataclass(frozen=True)
class KktReport:
    """Optimality certificate for an allocation at a given shadow rate.

    ``stationarity`` holds, per market, the distance of ``lambda_star`` from
    the admissible marginal-value interval (zero when inside, which covers
    the flat spot at a rate kink). The budget residual is compared against
    ``tol * max(1, budget)``; all other residuals against ``tol`` directly.
    """

    market_ids: tuple[str, ...]
    stationarity: tuple[float, ...]
    complementary_ok: tuple[bool, ...]
    budget_residual: float
    multiplier_residual: float
    tol: float
    passed: bool


@dataclass(frozen=True)
class WaterfillingDetail:
    """Closed-form solution internals for all-linear instances."""

    allocation: Allocation
    active_count: int
    order: tuple[str, ...]
    fill_thresholds: tuple[float, ...]


def effective_staking_rate(lam: float, s: float, l_max: float) -> float:
    """Staking rate that makes a budget-constrained solve look unconstrained.

    Equals ``s`` at ``lam = s`` and decreases as the shadow rate rises.
    """
    if l_max <= 1.0:
        raise DomainError(f"l_max must exceed 1, got {l_max}")
    return s + (s - lam) / (l_max - 1.0)


def _responses(p: ProblemInstance, lam: float) -> list[float]:
    return [
        market_response(market, l_max, p.staking_rate, lam)
        for market, l_max in zip(p.markets, p.l_max)
    ]


def _position_yield(
    exposures: Sequence[float],
    unleveraged: float,
    p: ProblemInstance,
    clamp_utilization: bool = False,
) -> float:
    """Instantaneous cash flow of a holding, without feasibility checks.

    With ``clamp_utilization`` the borrow rate is evaluated at full pool
    utilization when the debt overshoots available liquidity (stale positions
    marked against a shrunk pool).
    """
    total = unleveraged * p.staking_rate
    for x, market, l_max in zip(exposures, p.markets, p.l_max):
        debt = x * (l_max - 1.0)
        if clamp_utilization:
            debt_for_rate = min(debt, market.available_liquidity)
        else:
            debt_for_rate = debt
        rate = borrow_rate(market.irm, market.supplied, market.borrowed, debt_for_rate)
        total += x * l_max * p.staking_rate - debt * rate
    return total


def expected_yield(alloc: Allocation, p: ProblemInstance) -> float:
    """Instantaneous cash flow of a feasible allocation, per year."""
    _check_alloc_feasible(alloc, p)
    return _position_yield(alloc.exposures, alloc.unleveraged, p)


def yield_breakdown(alloc: Allocation, p: ProblemInstance) -> tuple[float, tuple[float, ...]]:
    """Split the cash flow into the all-staking base and per-market carry terms.

    Each carry term is ``debt * (s - borrow_rate)``: what looping adds on top
    of staking the whole budget.
    """
    _check_alloc_feasible(alloc, p)
    base = alloc.total * p.staking_rate
    carries = []
    for x, market, l_max in zip(alloc.exposures, p.markets, p.l_max):
        debt = x * (l_max - 1.0)
        rate = borrow_rate(market.irm, market.supplied, market.borrowed, debt)
        carries.append(debt * (p.staking_rate - rate))
    return base, tuple(carries)


def _check_alloc_feasible(alloc: Allocation, p: ProblemInstance) -> None:
    if alloc.market_ids != p.market_ids:
        raise ConstraintError(
            f"allocation markets {alloc.market_ids} do not match instance "
            f"markets {p.market_ids}"
        )
    slack = _REL_BUDGET_TOL * max(1.0, p.budget)
    if alloc.unleveraged < -slack or any(x < -slack for x in alloc.exposures):
        raise ConstraintError("allocation has a negative component")
    if abs(alloc.total - p.budget) > slack:
        raise ConstraintError(
            f"allocation total {alloc.total} does not match budget {p.budget}"
        )
    for x, market, l_max in zip(alloc.exposures, p.markets, p.l_max):
        if x * (l_max - 1.0) > market.available_liquidity + slack:
            raise ConstraintError(
                f"exposure {x} exceeds liquidity of market {market.market_id}"
            )


def solve_saturated(p: ProblemInstance) -> Allocation | None:
    """Allocation with every market saturated at the staking rate.

    Returns None when those responses overshoot the budget, in which case
    the caller must fall through to the unsaturated solve.
    """
    exposures = _responses(p, p.staking_rate)
    used = sum(exposures)
    if used > p.budget:
        return None
    alloc = Allocation(
        market_ids=p.market_ids,
        exposures=tuple(exposures),
        unleveraged=p.budget - used,
        lambda_star=p.staking_rate,
        expected_yield=0.0,
        regime=SATURATED,
    )
    return replace(alloc, expected_yield=_position_yield(alloc.exposures, alloc.unleveraged, p))


def solve(p: ProblemInstance) -> Allocation:
    """Optimal allocation of the budget across markets plus pure staking.

    Tries the saturated regime first; otherwise locates the shadow rate
    ``lambda_star > s`` at which the summed responses equal the budget, by
    scanning the merged response breakpoints and interpolating (exact on the
    affine pieces), with a bracketed root finder as fallback wherever a
    liquidity cap breaks the affine structure.
    """
    saturated = solve_saturated(p)
    if saturated is not None:
        return saturated

    s = p.staking_rate

    def total_at(lam: float) -> float:
        return sum(_responses(p, lam))

    levels: set[float] = set()
    for market, l_max in zip(p.markets, p.l_max):
        for bp in response_breakpoints(market, l_max, s):
            if bp > s:
                levels.add(bp)
    ordered = sorted(levels, reverse=True) + [s]

    lam_star = s
    hi = ordered[0]
    total_hi = total_at(hi)
    if total_hi >= p.budget:
        # Only reachable when every breakpoint sits exactly at s (responses
        # flat at the staking rate); the residual fold below trims the excess.
        lam_star = hi
    else:
        for lo in ordered[1:]:
            total_lo = total_at(lo)
            if total_lo >= p.budget:
                spread = total_lo - total_hi
                if spread <= 0.0:
                    lam_star = lo
                else:
                    lam_star = hi - (hi - lo) * (p.budget - total_hi) / spread
                if abs(total_at(lam_star) - p.budget) > _REL_BUDGET_TOL * p.budget:
                    # A liquidity cap kinked this bracket; fall back to Brent.
                    lam_star = bracketed_root(
                        lambda lam: total_at(lam) - p.budget, lo, hi, tol=_LAMBDA_TOL
                    )
                break
            hi, total_hi = lo, total_lo
        else:
            raise DomainError(
                "no shadow rate matches the budget; instance is inconsistent"
            )

    exposures = _responses(p, lam_star)
    used = sum(exposures)
    # Fold the interpolation residual into one market so the budget
    # constraint holds exactly: the largest exposure still below its
    # liquidity cap, or the market with the best entry value when the root
    # finder left every response at zero (tiny budgets).
    caps = [
        market.available_liquidity / (l_max - 1.0)
        for market, l_max in zip(p.markets, p.l_max)
    ]
    open_markets = [i for i in range(len(exposures)) if exposures[i] < caps[i]]

    def entry_value(i: int) -> float:
        _, hi_g = marginal_cost_subgradient(
            p.markets[i].irm, p.markets[i].supplied, p.markets[i].borrowed, 0.0
        )
        return p.l_max[i] * s - (p.l_max[i] - 1.0) * hi_g

    if used > 0.0 and any(exposures[i] > 0.0 for i in open_markets):
        idx = max(open_markets, key=lambda i: exposures[i])
    elif open_markets:
        idx = max(open_markets, key=entry_value)
    else:
        idx = max(range(len(exposures)), key=lambda i: exposures[i])
    exposures[idx] += p.budget - used
    alloc = Allocation(
        market_ids=p.market_ids,
        exposures=tuple(exposures),
        unleveraged=0.0,
        lambda_star=lam_star,
        expected_yield=0.0,
        regime=UNSATURATED,
    )
    return replace(alloc, expected_yield=_position_yield(alloc.exposures, alloc.unleveraged, p))


def _linear_coefficients(
    market: MarketState, l_max: float, s: float
) -> tuple[float, float]:
    irm = market.irm
    if not isinstance(irm, LinearIrmParams):
        raise UnsupportedModelError(
            f"market {market.market_id} does not use the linear rate model"
        )
    m = l_max - 1.0
    c1 = irm.r_slope1 / (market.supplied * irm.u_target)
    if c1 == 0.0:
        raise UnsupportedModelError(
            f"market {market.market_id} has a flat rate curve; the closed form "
            "needs a positive slope"
        )
    alpha = 1.0 / (2.0 * c1 * m * m)
    beta = l_max * s - m * (irm.r_base + market.borrowed * c1)
    return alpha, beta


def waterfilling_detail(p: ProblemInstance) -> WaterfillingDetail:
    """Closed-form unsaturated solve for all-linear instances.

    Markets are sorted by marginal value at zero exposure; the active set is
    the smallest prefix whose fill thresholds bracket the budget, and the
    shadow rate follows in closed form.
    """
    coeffs = [
        _linear_coefficients(market, l_max, p.staking_rate)
        for market, l_max in zip(p.markets, p.l_max)
    ]
    order = sorted(
        range(len(p.markets)),
        key=lambda i: (-coeffs[i][1], p.markets[i].market_id),
    )
    alphas = [coeffs[i][0] for i in order]
    betas = [coeffs[i][1] for i in order]
    n = len(order)

    thresholds = []
    for k in range(1, n + 1):
        beta_k = betas[k - 1]
        thresholds.append(sum(a * (b - beta_k) for a, b in zip(alphas[:k], betas[:k])))

    active = n
    for k in range(1, n + 1):
        upper = thresholds[k] if k < n else math.inf
        if thresholds[k - 1] < p.budget <= upper:
            active = k
            break

    num = sum(a * b for a, b in zip(alphas[:active], betas[:active])) - p.budget
    lam_star = num / sum(alphas[:active])

    exposures = [0.0] * n
    for rank in range(active):
        exposures[order[rank]] = alphas[rank] * max(betas[rank] - lam_star, 0.0)
    alloc = Allocation(
        market_ids=p.market_ids,
        exposures=tuple(exposures),
        unleveraged=0.0,
        lambda_star=lam_star,
        expected_yield=0.0,
        regime=UNSATURATED,
    )
    alloc = replace(alloc, expected_yield=_position_yield(alloc.exposures, alloc.unleveraged, p))
    return WaterfillingDetail(
        allocation=alloc,
        active_count=active,
        order=tuple(p.markets[i].market_id for i in order),
        fill_thresholds=tuple(thresholds),
    )


def solve_waterfilling_linear(p: ProblemInstance) -> Allocation:
    """Closed-form counterpart of :func:`solve` for all-linear instances in
    the unsaturated regime."""
    return waterfilling_detail(p).allocation


def verify_kkt(alloc: Allocation, p: ProblemInstance, tol: float) -> KktReport:
    """Check the stationarity, complementarity, and budget conditions.

    Active markets must have ``lambda_star`` inside the marginal-value
    interval induced by the one-sided marginal costs (one-sided only when the
    exposure sits at the liquidity cap); inactive markets must not be worth
    entering; the unleveraged remainder, when positive, pins the shadow rate
    to the staking rate.
    """
    _check_alloc_feasible(alloc, p)
    lam = alloc.lambda_star
    s = p.staking_rate
    budget_slack = tol * max(1.0, p.budget)

    stationarity: list[float] = []
    complementary: list[bool] = []
    for x, market, l_max in zip(alloc.exposures, p.markets, p.l_max):
        m = l_max - 1.0
        # Activity and cap proximity are judged on the market's own scale; a
        # budget-relative threshold would swallow small markets whole when
        # the budget dwarfs them.
        zero_eps = _REL_BUDGET_TOL * max(1.0, market.available_liquidity / m)
        if x <= zero_eps:
            lo_g, hi_g = marginal_cost_subgradient(
                market.irm, market.supplied, market.borrowed, 0.0
            )
            entry_value = l_max * s - m * hi_g
            residual = max(0.0, entry_value - lam)
            stationarity.append(residual)
            complementary.append(residual <= tol)
            continue
        debt = x * m
        lo_g, hi_g = marginal_cost_subgradient(
            market.irm, market.supplied, market.borrowed, debt
        )
        lo_value = l_max * s - m * hi_g
        hi_value = l_max * s - m * lo_g
        at_cap = debt >= market.available_liquidity * (1.0 - _REL_BUDGET_TOL)
        if at_cap:
            residual = max(0.0, lam - hi_value)
        else:
            residual = max(lo_value - lam, lam - hi_value, 0.0)
        stationarity.append(residual)
        complementary.append(True)

    if alloc.unleveraged > _REL_BUDGET_TOL * max(1.0, p.budget):
        multiplier_residual = abs(lam - s)
    else:
        multiplier_residual = max(0.0, s - lam)
    budget_residual = abs(alloc.total - p.budget)

    passed = (
        all(r <= tol for r in stationarity)
        and all(complementary)
        and multiplier_residual <= tol
        and budget_residual <= budget_slack
    )
    return KktReport(
        market_ids=p.market_ids,
        stationarity=tuple(stationarity),
        complementary_ok=tuple(complementary),
        budget_residual=budget_residual,
        multiplier_residual=multiplier_residual,
        tol=tol,
        passed=passed,
    )
