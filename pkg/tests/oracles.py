"""Independent reference implementations used to check the closed forms.

Everything here recomputes rates and objectives from the model definitions
directly (piecewise on utilization) and optimizes by brute force, so the
tests never reuse the code paths they are checking.
"""

from __future__ import annotations

import random

from stakeloop.irm import (
    AdaptiveIrmParams,
    KinkedIrmParams,
    LinearIrmParams,
    MarketState,
)


def oracle_rate(irm, supplied: float, total_borrowed: float) -> float:
    """Borrow rate at a pool state, written as piecewise utilization formulas."""
    u = total_borrowed / supplied
    if isinstance(irm, LinearIrmParams):
        return irm.r_base + irm.r_slope1 * u / irm.u_target
    if isinstance(irm, KinkedIrmParams):
        if u < irm.u_target:
            return irm.r_base + irm.r_slope1 * u / irm.u_target
        return irm.r_base + irm.r_slope1 + irm.r_slope2 * (u - irm.u_target) / (
            1.0 - irm.u_target
        )
    if isinstance(irm, AdaptiveIrmParams):
        if u < irm.u_target:
            err = (u - irm.u_target) / irm.u_target
            factor = (1.0 - 1.0 / irm.curve_steepness) * err + 1.0
        else:
            err = (u - irm.u_target) / (1.0 - irm.u_target)
            factor = (irm.curve_steepness - 1.0) * err + 1.0
        return irm.rate_at_target * factor
    raise TypeError(type(irm))


def market_term(market: MarketState, l_max: float, s: float, x: float) -> float:
    """Cash flow of exposure x held at the leverage cap in one market."""
    debt = x * (l_max - 1.0)
    rate = oracle_rate(market.irm, market.supplied, market.borrowed + debt)
    return x * l_max * s - debt * rate


def grid_response(
    market: MarketState, l_max: float, s: float, lam: float, points: int = 100_001
) -> float:
    """Arg-max over an x grid of the per-market term net of the shadow rate."""
    cap = (market.supplied - market.borrowed) / (l_max - 1.0)
    best_x = 0.0
    best_v = 0.0
    for k in range(points):
        x = cap * k / (points - 1)
        v = market_term(market, l_max, s, x) - lam * x
        if v > best_v:
            best_v, best_x = v, x
    return best_x


def simplex_objective(
    markets: list[MarketState], l_max: list[float], s: float, x: list[float], x0: float
) -> float:
    total = x0 * s
    for market, l, xi in zip(markets, l_max, x):
        total += market_term(market, l, s, xi)
    return total


def simplex_search(
    markets: list[MarketState],
    l_max: list[float],
    s: float,
    budget: float,
    min_steps: int = 10_000,
) -> float:
    """Projected pairwise coordinate search on the capped budget simplex.

    Slot 0 is the unleveraged holding; slots 1..n are market exposures capped
    at available liquidity. Moves mass between slot pairs with a shrinking
    step, counting every candidate evaluation as one refinement step and
    cycling the schedule until at least ``min_steps`` have run. Returns the
    best cash flow found.
    """
    n = len(markets)
    caps = [(m.supplied - m.borrowed) / (l - 1.0) for m, l in zip(markets, l_max)]

    def term(slot: int, value: float) -> float:
        if slot == 0:
            return value * s
        return market_term(markets[slot - 1], l_max[slot - 1], s, value)

    x = [budget] + [0.0] * n
    terms = [term(i, x[i]) for i in range(n + 1)]
    evals = 0
    floor = 1e-12 * budget

    while evals < min_steps:
        delta = budget / 2.0
        while delta > floor:
            improved = True
            while improved:
                improved = False
                for i in range(n + 1):
                    if x[i] <= 0.0:
                        continue
                    for j in range(n + 1):
                        if i == j:
                            continue
                        room = budget if j == 0 else caps[j - 1] - x[j]
                        step = min(delta, x[i], room)
                        if step <= 0.0:
                            continue
                        new_i = term(i, x[i] - step)
                        new_j = term(j, x[j] + step)
                        evals += 1
                        if new_i + new_j > terms[i] + terms[j] + 1e-16:
                            x[i] -= step
                            x[j] += step
                            terms[i], terms[j] = new_i, new_j
                            improved = True
            delta *= 0.5
    return sum(terms)


def random_instance(rng: random.Random, n: int | None = None):
    """Seeded mixed-model instance spanning both solver regimes.

    Returns (markets, l_max list, staking rate, budget).
    """
    from stakeloop.irm import market_response

    n = n if n is not None else rng.randint(1, 4)
    s = rng.uniform(0.01, 0.06)
    markets = []
    l_maxes = []
    for i in range(n):
        supplied = rng.uniform(10.0, 1e4)
        u_target = rng.uniform(0.7, 0.95)
        borrowed = rng.uniform(0.0, 0.95 * supplied * u_target)
        kind = rng.choice(("linear", "kinked", "adaptive"))
        if kind == "linear":
            irm = LinearIrmParams(
                r_base=rng.uniform(0.0, 0.02),
                r_slope1=rng.uniform(0.01, 0.08),
                u_target=u_target,
            )
        elif kind == "kinked":
            irm = KinkedIrmParams(
                r_base=rng.uniform(0.0, 0.02),
                r_slope1=rng.uniform(0.005, 0.04),
                r_slope2=rng.uniform(0.1, 1.0),
                u_target=u_target,
            )
        else:
            irm = AdaptiveIrmParams(
                rate_at_target=rng.uniform(0.005, 0.08),
                curve_steepness=rng.uniform(2.0, 6.0),
                u_target=u_target,
                adjustment_speed=50.0,
                t_last=0.0,
                u_last=borrowed / supplied,
            )
        markets.append(
            MarketState(
                market_id=f"m{i}",
                supplied=supplied,
                borrowed=borrowed,
                max_ltv=rng.uniform(0.9, 0.965),
                irm=irm,
            )
        )
        l_maxes.append(rng.uniform(2.0, 8.0))

    saturated_total = sum(
        market_response(m, l, s, s) for m, l in zip(markets, l_maxes)
    )
    if saturated_total > 0.0:
        budget = saturated_total * rng.uniform(0.2, 2.5)
    else:
        budget = rng.uniform(1.0, 100.0)
    return markets, l_maxes, s, max(budget, 1e-3)
