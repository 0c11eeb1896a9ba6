"""Market history fetching over GraphQL.

Pulls hourly pool states (supplied, borrowed, borrow rate, rate at target)
from a lending-protocol API plus a daily staking-rate series, and writes them
in the canonical dataset layout. The HTTP transport is injectable so the
query construction and response handling are testable offline; all primary
functionality of the package runs without this module.

Queried fields (documented mapping):

* market: ``lltv`` (1e18-scaled), ``loanAsset.decimals``, and
  ``historicalState.{supplyAssets,borrowAssets,borrowApy,rateAtTarget}`` as
  hourly point series ``{x: timestamp, y: value}``; asset amounts are
  converted to whole loan-asset units, rates are annual fractions.
* staking: daily ``{timestamp, apr}`` entries, fraction per year.

Values are treated as instantaneous samples at their timestamps.
"""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

from .backtest import MarketMeta, MarketSnapshot, Snapshot, SnapshotSeries
from .data import DatasetManifest, MarketDescriptor, save_snapshots
from .errors import DataError
from .units import SECONDS_PER_DAY, SECONDS_PER_HOUR

MORPHO_API_URL = "https://api.morpho.org/graphql"

Transport = Callable[[str, dict], dict]

_MARKET_QUERY = """
query MarketHistory($id: String!, $options: TimeseriesOptions) {
  market(id: $id) {
    id
    lltv
    creationTimestamp
    loanAsset { decimals }
    historicalState {
      supplyAssets(options: $options) { x y }
      borrowAssets(options: $options) { x y }
      borrowApy(options: $options) { x y }
      rateAtTarget(options: $options) { x y }
    }
  }
}
"""

_STAKING_QUERY = """
query StakingRates($first: Int!, $skip: Int!) {
  totalRewards(first: $first, skip: $skip, orderBy: blockTime, orderDirection: asc) {
    blockTime
    apr
  }
}
"""


def http_transport(timeout: float = 30.0, api_key: str | None = None) -> Transport:
    """POST JSON to a GraphQL endpoint and return the decoded body."""

    def post(url: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        request = urllib.request.Request(
            url, data=json.dumps(payload).encode(), headers=headers
        )
        try:
            with urllib.request.urlopen(request, timeout=timeout) as response:
                return json.loads(response.read().decode())
        except urllib.error.HTTPError as exc:
            retry_after = exc.headers.get("Retry-After") if exc.headers else None
            hint = f" (retry after {retry_after}s)" if retry_after else ""
            raise DataError(f"HTTP {exc.code} from {url}{hint}") from exc
        except urllib.error.URLError as exc:
            raise DataError(f"cannot reach {url}: {exc.reason}") from exc

    return post


class _RateLimiter:
    """Minimum spacing between calls, shared across worker threads."""

    def __init__(self, min_interval: float):
        self._min_interval = min_interval
        self._lock = threading.Lock()
        self._last = 0.0

    def wait(self) -> None:
        with self._lock:
            now = time.monotonic()
            delay = self._last + self._min_interval - now
            if delay > 0:
                time.sleep(delay)
            self._last = max(now, self._last + self._min_interval)


def _run_query(
    transport: Transport, url: str, query: str, variables: dict, limiter: _RateLimiter
) -> dict:
    limiter.wait()
    body = transport(url, {"query": query, "variables": variables})
    if body.get("errors"):
        messages = "; ".join(e.get("message", "?") for e in body["errors"])
        raise DataError(f"GraphQL errors from {url}: {messages}")
    data = body.get("data")
    if data is None:
        raise DataError(f"GraphQL response from {url} has no data")
    return data


def _points_to_map(points: list[dict], scale: float = 1.0) -> dict[int, float]:
    return {int(p["x"]): float(p["y"]) / scale for p in points}


def _fetch_one_market(
    transport: Transport,
    endpoint: str,
    market_id: str,
    start: int,
    end: int,
    limiter: _RateLimiter,
    chunk_days: int = 30,
) -> tuple[MarketDescriptor, dict[int, MarketSnapshot]]:
    supplied: dict[int, float] = {}
    borrowed: dict[int, float] = {}
    rates: dict[int, float] = {}
    targets: dict[int, float] = {}
    lltv = None
    creation = ""

    chunk = chunk_days * SECONDS_PER_DAY
    cursor = start
    while cursor < end:
        options = {
            "startTimestamp": cursor,
            "endTimestamp": min(cursor + chunk, end),
            "interval": "HOUR",
        }
        data = _run_query(
            transport,
            endpoint,
            _MARKET_QUERY,
            {"id": market_id, "options": options},
            limiter,
        )
        market = data.get("market")
        if market is None:
            raise DataError(f"market {market_id} not found on {endpoint}")
        lltv = float(market["lltv"]) / 1e18
        creation = str(market.get("creationTimestamp", ""))
        decimals = int(market["loanAsset"]["decimals"])
        scale = 10.0**decimals
        hist = market["historicalState"]
        supplied.update(_points_to_map(hist["supplyAssets"], scale))
        borrowed.update(_points_to_map(hist["borrowAssets"], scale))
        rates.update(_points_to_map(hist["borrowApy"]))
        targets.update(_points_to_map(hist.get("rateAtTarget") or []))
        cursor += chunk

    if lltv is None or not supplied:
        raise DataError(f"market {market_id}: no data returned for [{start}, {end})")

    snapshots: dict[int, MarketSnapshot] = {}
    for ts in sorted(supplied):
        if ts not in borrowed or ts not in rates:
            continue  # incomplete hour; surfaces later as a gap
        snapshots[ts] = MarketSnapshot(
            supplied=supplied[ts],
            borrowed=min(borrowed[ts], supplied[ts]),
            borrow_rate=rates[ts],
            rate_at_target=targets.get(ts),
        )
    descriptor = MarketDescriptor(market_id=market_id, creation_date=creation, lltv=lltv)
    return descriptor, snapshots


def _fetch_staking(
    transport: Transport, endpoint: str, start: int, end: int, limiter: _RateLimiter
) -> list[tuple[int, float]]:
    page = 1000
    skip = 0
    out: list[tuple[int, float]] = []
    while True:
        data = _run_query(
            transport, endpoint, _STAKING_QUERY, {"first": page, "skip": skip}, limiter
        )
        rows = data.get("totalRewards") or []
        for row in rows:
            ts = int(row["blockTime"])
            if start - SECONDS_PER_DAY <= ts <= end:
                out.append((ts, float(row["apr"])))
        if len(rows) < page:
            break
        skip += page
    if not out:
        raise DataError(f"no staking rates in [{start}, {end}] from {endpoint}")
    return sorted(out)


def fetch_market_history(
    market_ids: Sequence[str],
    start: int,
    end: int,
    out_dir: Path,
    endpoint: str = MORPHO_API_URL,
    staking_endpoint: str | None = None,
    staking_rate: float | None = None,
    api_key: str | None = None,
    chain: str = "ethereum",
    parallelism: int = 4,
    min_interval: float = 0.25,
    transport: Transport | None = None,
) -> Path:
    """Fetch hourly market states plus staking rates and write a dataset.

    Either ``staking_endpoint`` (a GraphQL source of daily APRs) or a flat
    ``staking_rate`` must be given. Re-fetching a closed time range overwrites
    the dataset identically. Returns the dataset directory.
    """
    if not market_ids:
        raise DataError("market id list must not be empty")
    if end <= start:
        raise DataError("end must be after start")
    if staking_endpoint is None and staking_rate is None:
        raise DataError("either staking_endpoint or staking_rate is required")
    post = transport or http_transport(api_key=api_key)
    limiter = _RateLimiter(min_interval)

    with ThreadPoolExecutor(max_workers=min(parallelism, len(market_ids))) as pool:
        fetched = list(
            pool.map(
                lambda mid: _fetch_one_market(post, endpoint, mid, start, end, limiter),
                market_ids,
            )
        )

    common = set.intersection(*(set(snaps) for _, snaps in fetched))
    if not common:
        raise DataError("markets share no common timestamps in the range")
    timestamps = sorted(common)

    if staking_endpoint is not None:
        staking = _fetch_staking(post, staking_endpoint, start, end, limiter)
    else:
        staking = [(timestamps[0], float(staking_rate))]

    def staking_at(ts: int) -> float:
        value = staking[0][1]
        for when, rate in staking:
            if when <= ts:
                value = rate
            else:
                break
        return value

    snapshots = tuple(
        Snapshot(
            timestamp=ts,
            staking_rate=staking_at(ts),
            markets={desc.market_id: snaps[ts] for desc, snaps in fetched},
        )
        for ts in timestamps
    )
    series = SnapshotSeries(
        markets=tuple(
            MarketMeta(market_id=d.market_id, max_ltv=d.lltv) for d, _ in fetched
        ),
        snapshots=snapshots,
    )
    manifest = DatasetManifest(
        chain=chain,
        markets=tuple(d for d, _ in fetched),
        period_start=timestamps[0],
        period_end=timestamps[-1],
        cadence_seconds=SECONDS_PER_HOUR,
        source="fetched",
    )
    out_dir = Path(out_dir)
    save_snapshots(series, manifest, out_dir)
    return out_dir
