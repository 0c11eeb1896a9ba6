"""Interest rate models and the closed-form per-market borrow response.

Three deterministic models map pool utilization (borrowed/supplied) to the
instantaneous borrow rate:

* linear: one slope, rate reaches ``r_base + r_slope1`` at ``u_target``;
* kinked: the slope jumps at ``u_target`` so the rate reaches
  ``r_base + r_slope1 + r_slope2`` at full utilization;
* adaptive: a controller state ``rate_at_target`` multiplied by a
  piecewise-linear curve of utilization (``1/curve_steepness`` at zero
  utilization, 1 at target, ``curve_steepness`` at full), with the
  controller state drifting exponentially while the pool sits off target.

All rates are annual fractions. The module also provides the maximizer of
the per-market leveraged carry given a shadow rate ``lam`` on budget, which
is the building block of the multi-market allocator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

from .errors import (
    ConstraintError,
    DomainError,
    LiquidityExceededError,
    UnsupportedModelError,
)
from .units import SECONDS_PER_YEAR


@dataclass(frozen=True)
class LinearIrmParams:
    """Single-slope rate curve. At utilization ``u_target`` the borrow rate
    equals ``r_base + r_slope1``; it keeps the same slope beyond target."""

    r_base: float
    r_slope1: float
    u_target: float

    def __post_init__(self) -> None:
        if not 0.0 < self.u_target < 1.0:
            raise DomainError(f"u_target must be in (0, 1), got {self.u_target}")
        if self.r_base < 0.0 or self.r_slope1 < 0.0:
            raise DomainError("r_base and r_slope1 must be non-negative")


@dataclass(frozen=True)
class KinkedIrmParams:
    """Two-slope rate curve with the slope jump at ``u_target``.

    Normalization: the rate is ``r_base + r_slope1`` at target utilization
    and ``r_base + r_slope1 + r_slope2`` at full utilization. Construction
    requires ``r_slope1 < u_target / (1 - u_target) * r_slope2`` so that the
    marginal cost of borrowing increases across the kink.
    """

    r_base: float
    r_slope1: float
    r_slope2: float
    u_target: float

    def __post_init__(self) -> None:
        if not 0.0 < self.u_target < 1.0:
            raise DomainError(f"u_target must be in (0, 1), got {self.u_target}")
        if min(self.r_base, self.r_slope1, self.r_slope2) < 0.0:
            raise DomainError("rate parameters must be non-negative")
        bound = self.u_target / (1.0 - self.u_target) * self.r_slope2
        if not self.r_slope1 < bound:
            raise DomainError(
                f"r_slope1={self.r_slope1} must be below "
                f"u_target/(1-u_target)*r_slope2={bound}"
            )


@dataclass(frozen=True)
class AdaptiveIrmParams:
    """Controller-driven curve around a drifting ``rate_at_target``.

    ``adjustment_speed`` is in 1/year; ``t_last`` is the UTC timestamp of the
    last pool interaction and ``u_last`` the utilization recorded then.
    """

    rate_at_target: float
    curve_steepness: float
    u_target: float
    adjustment_speed: float
    t_last: float
    u_last: float

    def __post_init__(self) -> None:
        if self.rate_at_target <= 0.0:
            raise DomainError("rate_at_target must be positive")
        if self.curve_steepness <= 1.0:
            raise DomainError("curve_steepness must exceed 1")
        if not 0.0 < self.u_target < 1.0:
            raise DomainError(f"u_target must be in (0, 1), got {self.u_target}")
        if (1.0 - self.u_target) / self.u_target >= self.curve_steepness:
            raise DomainError(
                "curve_steepness must exceed (1 - u_target) / u_target for the "
                "marginal borrow cost to increase across the target"
            )
        if self.adjustment_speed <= 0.0:
            raise DomainError("adjustment_speed must be positive")
        if not 0.0 <= self.u_last <= 1.0:
            raise DomainError(f"u_last must be in [0, 1], got {self.u_last}")


IrmParams = Union[LinearIrmParams, KinkedIrmParams, AdaptiveIrmParams]


@dataclass(frozen=True)
class MarketState:
    """One lending market as seen by a borrower: liquidity, LTV cap, rate model."""

    market_id: str
    supplied: float
    borrowed: float
    max_ltv: float
    irm: IrmParams

    def __post_init__(self) -> None:
        if self.supplied <= 0.0:
            raise DomainError(f"supplied must be positive, got {self.supplied}")
        if self.borrowed < 0.0:
            raise DomainError(f"borrowed must be non-negative, got {self.borrowed}")
        if self.borrowed > self.supplied:
            raise DomainError(
                f"borrowed {self.borrowed} exceeds supplied {self.supplied}"
            )
        if not 0.0 < self.max_ltv < 1.0:
            raise DomainError(f"max_ltv must be in (0, 1), got {self.max_ltv}")

    @property
    def utilization(self) -> float:
        return self.borrowed / self.supplied

    @property
    def available_liquidity(self) -> float:
        return self.supplied - self.borrowed


def utilization_error(u: float, u_target: float) -> float:
    """Signed distance from target, normalized to [-1, 1] on each side."""
    if u < u_target:
        return (u - u_target) / u_target
    return (u - u_target) / (1.0 - u_target)


def adaptive_curve_factor(u: float, u_target: float, curve_steepness: float) -> float:
    """Multiplier applied to rate_at_target: 1/steepness at u=0, 1 at target,
    steepness at u=1."""
    err = utilization_error(u, u_target)
    if u < u_target:
        return (1.0 - 1.0 / curve_steepness) * err + 1.0
    return (curve_steepness - 1.0) * err + 1.0


def kinked_equivalent(irm: AdaptiveIrmParams) -> KinkedIrmParams:
    """Kinked parameterization producing the same rate curve as ``irm`` at a
    frozen controller state."""
    r_t = irm.rate_at_target
    steep = irm.curve_steepness
    return KinkedIrmParams(
        r_base=r_t / steep,
        r_slope1=r_t * (1.0 - 1.0 / steep),
        r_slope2=r_t * (steep - 1.0),
        u_target=irm.u_target,
    )


def _check_pool_amounts(supplied: float, borrowed: float, delta_borrow: float) -> float:
    if supplied <= 0.0:
        raise DomainError(f"supplied must be positive, got {supplied}")
    if borrowed < 0.0:
        raise DomainError(f"borrowed must be non-negative, got {borrowed}")
    total = borrowed + delta_borrow
    if total < 0.0:
        raise DomainError(f"total borrowed would be negative: {total}")
    if total > supplied:
        # Liquidity-capped exposures reconstruct the borrow amount as
        # x * (l_max - 1), which can overshoot the cap by rounding noise.
        if total <= supplied * (1.0 + 1e-12):
            return supplied
        raise LiquidityExceededError(
            f"borrowing {delta_borrow} on top of {borrowed} exceeds supplied {supplied}"
        )
    return total


def borrow_rate(
    irm: IrmParams, supplied: float, borrowed: float, delta_borrow: float = 0.0
) -> float:
    """Borrow rate after adding ``delta_borrow`` to the pool's borrowed amount.

    Continuous and non-decreasing in ``delta_borrow``; raises
    ``LiquidityExceededError`` when the post-trade utilization would exceed 1.
    """
    total = _check_pool_amounts(supplied, borrowed, delta_borrow)
    u = total / supplied
    if isinstance(irm, LinearIrmParams):
        return irm.r_base + u / irm.u_target * irm.r_slope1
    if isinstance(irm, KinkedIrmParams):
        if u < irm.u_target:
            return irm.r_base + u / irm.u_target * irm.r_slope1
        return (
            irm.r_base
            + irm.r_slope1
            + (u - irm.u_target) / (1.0 - irm.u_target) * irm.r_slope2
        )
    if isinstance(irm, AdaptiveIrmParams):
        factor = adaptive_curve_factor(u, irm.u_target, irm.curve_steepness)
        return irm.rate_at_target * factor
    raise UnsupportedModelError(f"unknown rate model {type(irm).__name__}")


def _slopes(irm: IrmParams, supplied: float) -> tuple[float, float]:
    """Rate-per-borrowed-unit slopes (below target, above target)."""
    if isinstance(irm, LinearIrmParams):
        c = irm.r_slope1 / (supplied * irm.u_target)
        return c, c
    if isinstance(irm, KinkedIrmParams):
        return (
            irm.r_slope1 / (supplied * irm.u_target),
            irm.r_slope2 / (supplied * (1.0 - irm.u_target)),
        )
    if isinstance(irm, AdaptiveIrmParams):
        return _slopes(kinked_equivalent(irm), supplied)
    raise UnsupportedModelError(f"unknown rate model {type(irm).__name__}")


def marginal_cost_subgradient(
    irm: IrmParams, supplied: float, borrowed: float, borrow_amount: float
) -> tuple[float, float]:
    """One-sided derivatives [lo, hi] of ``B * rate(B)`` at ``B = borrow_amount``.

    ``borrow_amount`` is new borrowing on top of the pool's ``borrowed``. The
    interval is degenerate (lo == hi) wherever the rate curve is smooth and
    spans the left/right derivatives exactly at the kink.
    """
    total = _check_pool_amounts(supplied, borrowed, borrow_amount)
    rate = borrow_rate(irm, supplied, borrowed, borrow_amount)
    lo_slope, hi_slope = _slopes(irm, supplied)
    if isinstance(irm, LinearIrmParams):
        return (rate + borrow_amount * lo_slope, rate + borrow_amount * lo_slope)
    target_amount = supplied * _target_utilization(irm)
    # Amounts derived from the kink exposure can miss it by a few ulps; treat
    # anything that close as sitting on the kink.
    kink_snap = 1e-12 * max(1.0, target_amount)
    if abs(total - target_amount) <= kink_snap:
        return (rate + borrow_amount * lo_slope, rate + borrow_amount * hi_slope)
    if total < target_amount:
        return (rate + borrow_amount * lo_slope, rate + borrow_amount * lo_slope)
    return (rate + borrow_amount * hi_slope, rate + borrow_amount * hi_slope)


def _target_utilization(irm: IrmParams) -> float:
    return irm.u_target


def _kinked_response_params(
    kinked: KinkedIrmParams, supplied: float, borrowed: float, l_max: float, s: float
) -> dict[str, float]:
    """Coefficients of the piecewise response for a kinked curve."""
    m = l_max - 1.0
    target_amount = supplied * kinked.u_target
    c1 = kinked.r_slope1 / (supplied * kinked.u_target)
    c2 = kinked.r_slope2 / (supplied * (1.0 - kinked.u_target))
    headroom = target_amount - borrowed  # borrowing room below the kink
    beta1 = l_max * s - m * (kinked.r_base + borrowed * c1)
    beta2 = l_max * s - m * (kinked.r_base + kinked.r_slope1 + (borrowed - target_amount) * c2)
    lam1 = l_max * s - m * (kinked.r_base + kinked.r_slope1 + headroom * c1)
    lam2 = l_max * s - m * (kinked.r_base + kinked.r_slope1 + headroom * c2)
    return {
        "m": m,
        "c1": c1,
        "c2": c2,
        "headroom": headroom,
        "beta1": beta1,
        "beta2": beta2,
        "lam1": lam1,
        "lam2": lam2,
    }


def _affine_response(slope_times_two: float, beta: float, lam: float) -> float:
    """Positive part of the affine response, written to avoid inf * 0."""
    if lam >= beta:
        return 0.0
    return (beta - lam) / slope_times_two


def _validate_leverage_cap(market: MarketState, l_max: float) -> None:
    bound = 1.0 / (1.0 - market.max_ltv)
    if not 1.0 < l_max <= bound:
        raise ConstraintError(
            f"l_max={l_max} outside (1, {bound:.6g}] allowed by "
            f"max_ltv={market.max_ltv} of market {market.market_id}"
        )


def market_response(market: MarketState, l_max: float, s: float, lam: float) -> float:
    """Exposure maximizing the leveraged carry of one market at shadow rate ``lam``.

    Solves the stationarity condition
    ``l_max*s - (l_max-1)*(b(B) + B*b'(B)) = lam`` for the new borrowing
    ``B = x*(l_max-1)``, handling the kink by pinning the exposure at the
    target-utilization boundary whenever ``lam`` falls inside the flat spot of
    the marginal cost. The result is clipped at available pool liquidity and
    is non-increasing in ``lam``.
    """
    _validate_leverage_cap(market, l_max)
    if not math.isfinite(lam):
        raise DomainError(f"lam must be finite, got {lam}")
    m = l_max - 1.0
    cap = market.available_liquidity / m
    if cap <= 0.0:
        return 0.0

    irm = market.irm
    if isinstance(irm, AdaptiveIrmParams):
        irm = kinked_equivalent(irm)

    if isinstance(irm, LinearIrmParams):
        c1 = irm.r_slope1 / (market.supplied * irm.u_target)
        beta = l_max * s - m * (irm.r_base + market.borrowed * c1)
        if c1 == 0.0:
            # Flat marginal cost: all-or-nothing up to the liquidity cap.
            return cap if lam < beta else 0.0
        return min(_affine_response(2.0 * c1 * m * m, beta, lam), cap)

    if isinstance(irm, KinkedIrmParams):
        p = _kinked_response_params(irm, market.supplied, market.borrowed, l_max, s)
        if p["headroom"] <= 0.0:
            # Pool already at or past target utilization: single steep branch.
            x = _affine_response(2.0 * p["c2"] * m * m, p["beta2"], lam)
            return min(x, cap)
        if lam > p["lam1"]:
            if p["c1"] == 0.0:
                x = 0.0  # lam > lam1 == beta1, nothing profitable below the kink
            else:
                x = _affine_response(2.0 * p["c1"] * m * m, p["beta1"], lam)
        elif lam >= p["lam2"]:
            x = p["headroom"] / m
        else:
            x = _affine_response(2.0 * p["c2"] * m * m, p["beta2"], lam)
        return min(x, cap)

    raise UnsupportedModelError(f"unknown rate model {type(market.irm).__name__}")


def response_breakpoints(market: MarketState, l_max: float, s: float) -> list[float]:
    """Shadow rates at which the market's response changes analytic form.

    Sorted descending; the response is affine in ``lam`` between consecutive
    values (liquidity clipping aside).
    """
    _validate_leverage_cap(market, l_max)
    m = l_max - 1.0
    irm = market.irm
    if isinstance(irm, AdaptiveIrmParams):
        irm = kinked_equivalent(irm)
    if isinstance(irm, LinearIrmParams):
        c1 = irm.r_slope1 / (market.supplied * irm.u_target)
        return [l_max * s - m * (irm.r_base + market.borrowed * c1)]
    if isinstance(irm, KinkedIrmParams):
        p = _kinked_response_params(irm, market.supplied, market.borrowed, l_max, s)
        if p["headroom"] <= 0.0:
            return [p["beta2"]]
        points = [p["beta1"], p["lam1"], p["lam2"]]
        out: list[float] = []
        for v in sorted(points, reverse=True):
            if not out or v < out[-1]:
                out.append(v)
        return out
    raise UnsupportedModelError(f"unknown rate model {type(market.irm).__name__}")


def advance_adaptive_rate(
    irm: AdaptiveIrmParams, u_now: float, t_now: float
) -> AdaptiveIrmParams:
    """Roll the controller state forward to ``t_now``.

    ``rate_at_target`` is multiplied by
    ``exp(adjustment_speed * error(u_last) * elapsed_years)``; the new state
    records ``u_now`` and ``t_now`` for the next interaction.
    """
    if t_now < irm.t_last:
        raise DomainError(f"t_now={t_now} precedes t_last={irm.t_last}")
    if not 0.0 <= u_now <= 1.0:
        raise DomainError(f"u_now must be in [0, 1], got {u_now}")
    elapsed_years = (t_now - irm.t_last) / SECONDS_PER_YEAR
    err = utilization_error(irm.u_last, irm.u_target)
    factor = math.exp(irm.adjustment_speed * err * elapsed_years)
    return replace(
        irm,
        rate_at_target=irm.rate_at_target * factor,
        t_last=t_now,
        u_last=u_now,
    )
