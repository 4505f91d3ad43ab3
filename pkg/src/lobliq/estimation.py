"""Calibration from Level-I message/order-book files.

Files follow the LOBSTER layout: message rows ``time, type, order_id, size,
price, direction`` and order-book rows ``ask_price, ask_size, bid_price,
bid_size`` giving the book after each message.  Prices are stored in ticks.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateData, MalformedRow, MissingKind, NonMonotoneTime
from .model import ASK, BID, ModelParams, dir_index

TRADING_WINDOW = (35400.0, 56400.0)

KINDS = ("limit_arrival", "market_execution", "cancellation", "hidden_execution", "other")
LIMIT, MARKET, CANCEL, HIDDEN, OTHER = range(5)
_TYPE_TO_KIND = {1: LIMIT, 2: CANCEL, 3: CANCEL, 4: MARKET, 5: HIDDEN}
SIDE_NAMES = ("ask", "bid")


class CoverageTooLow(UserWarning):
    """Truncation to ``{1..N}^2`` discards more than 5% of the empirical mass."""


@dataclass(frozen=True)
class EventRecord:
    timestamp: float
    kind: str
    side: str
    size: float
    price: float
    order_id: int = 0
    ask_price: float = 0.0
    ask_size: float = 0.0
    bid_price: float = 0.0
    bid_size: float = 0.0


class EventLog(Sequence):
    """Parsed events stored column-wise; indexing yields :class:`EventRecord`."""

    def __init__(self, t, kind, side, size, price, order_id, book, excluded=None):
        self.t = np.asarray(t, dtype=float)
        self.kind = np.asarray(kind, dtype=np.int8)
        self.side = np.asarray(side, dtype=np.int8)
        self.size = np.asarray(size, dtype=float)
        self.price = np.asarray(price, dtype=float)
        self.order_id = np.asarray(order_id, dtype=np.int64)
        self.book = np.asarray(book, dtype=float).reshape(-1, 4)
        self.excluded = dict(excluded or {})

    def __len__(self):
        return self.t.size

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        b = self.book[i]
        return EventRecord(float(self.t[i]), KINDS[self.kind[i]], SIDE_NAMES[self.side[i]],
                           float(self.size[i]), float(self.price[i]), int(self.order_id[i]),
                           float(b[0]), float(b[1]), float(b[2]), float(b[3]))

    def scaled(self, c: float) -> "EventLog":
        """Copy with every timestamp multiplied by ``c``."""
        return EventLog(self.t * c, self.kind, self.side, self.size, self.price, self.order_id,
                        self.book, self.excluded)

    @classmethod
    def from_stream(cls, stream) -> "EventLog":
        """Build directly from a synthetic :class:`~lobliq.simulator.EventStream`."""
        msg = stream.messages
        book = stream.book.copy()
        book[:, [0, 2]] /= stream.tick
        kinds = np.array([_TYPE_TO_KIND.get(int(c), OTHER) for c in msg[:, 1]], dtype=np.int8)
        side = np.where(msg[:, 5] < 0, ASK, BID)
        return cls(msg[:, 0], kinds, side, msg[:, 3], msg[:, 4] / stream.tick, msg[:, 2], book)


def _read_rows(path: Path, min_cols: int):
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < min_cols:
                raise MalformedRow(path, line_no, f"expected {min_cols} columns, got {len(row)}")
            yield line_no, row


def parse_events(message_path, orderbook_path, tick: float = 100.0,
                 window: tuple[float, float] | None = TRADING_WINDOW) -> EventLog:
    """Read a message/order-book pair, drop hidden executions and rows outside ``window``."""
    message_path, orderbook_path = Path(message_path), Path(orderbook_path)
    for p in (message_path, orderbook_path):
        if not p.exists():
            raise FileNotFoundError(p)
    cols = {k: [] for k in ("t", "kind", "side", "size", "price", "oid", "book")}
    excluded = {"hidden_execution": 0, "outside_window": 0}
    book_rows = _read_rows(orderbook_path, 4)
    last_t = -math.inf
    for line_no, row in _read_rows(message_path, 6):
        try:
            b_line, b = next(book_rows)
        except StopIteration:
            raise MalformedRow(orderbook_path, line_no, "order book has fewer rows than messages") from None
        try:
            t = float(row[0])
            typ = int(float(row[1]))
            oid = int(float(row[2]))
            size = float(row[3])
            price = float(row[4])
            direction = int(float(row[5]))
        except ValueError as exc:
            raise MalformedRow(message_path, line_no, str(exc)) from None
        try:
            book = [float(b[0]) / tick, float(b[1]), float(b[2]) / tick, float(b[3])]
        except ValueError as exc:
            raise MalformedRow(orderbook_path, b_line, str(exc)) from None
        if not math.isfinite(t) or direction not in (1, -1):
            raise MalformedRow(message_path, line_no, "bad time or direction")
        if t < last_t:
            raise NonMonotoneTime(message_path, line_no)
        last_t = t
        kind = _TYPE_TO_KIND.get(typ, OTHER)
        if kind == HIDDEN:
            excluded["hidden_execution"] += 1
            continue
        if window is not None and not window[0] <= t <= window[1]:
            excluded["outside_window"] += 1
            continue
        cols["t"].append(t)
        cols["kind"].append(kind)
        cols["side"].append(ASK if direction < 0 else BID)
        cols["size"].append(size)
        cols["price"].append(price / tick)
        cols["oid"].append(oid)
        cols["book"].append(book)
    return EventLog(cols["t"], cols["kind"], cols["side"], cols["size"], cols["price"],
                    cols["oid"], cols["book"], excluded)


def estimate_unit_sizes(events: EventLog) -> tuple[float, float, float]:
    """Mean share size of limit arrivals, market executions and cancellations."""
    out = []
    for k in (LIMIT, MARKET, CANCEL):
        sel = events.kind == k
        if not sel.any():
            raise MissingKind(f"no {KINDS[k]} events")
        out.append(float(events.size[sel].mean()))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class QueueRace:
    """One direction-tagged race; ``counts[side, k]`` with k = market, limit, cancel."""

    direction: int
    start: float
    end: float
    latency: float
    counts: np.ndarray
    cancel_shares: np.ndarray
    vol_integral: np.ndarray  # shares x seconds per side, after the latency cut
    start_volume: np.ndarray  # shares per side at start + latency
    path_t: np.ndarray = field(repr=False)
    path_vol: np.ndarray = field(repr=False)

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def exposure(self) -> float:
        return self.end - self.start - self.latency


def _quote_periods(events: EventLog):
    ap = events.book[:, 0]
    bp = events.book[:, 2]
    change = np.ones(len(events), dtype=bool)
    change[1:] = (ap[1:] != ap[:-1]) | (bp[1:] != bp[:-1])
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], len(events))  # exclusive
    return starts, ends, ap[starts], bp[starts]


def segment_races(events: EventLog, latency: float = 0.0) -> tuple[list[QueueRace], list[QueueRace]]:
    """Split the stream into up- and down-races at one-tick spread.

    A race runs from the first row showing its quote to the row that empties
    one of its best queues.  It is kept when it was preceded by a race whose
    quote sits exactly one tick away, reached through one clean depletion,
    and when it ends by a one-tick depletion itself.
    """
    if latency < 0:
        raise ValueError("latency must be non-negative")
    races = {1: [], -1: []}
    n = len(events)
    if n == 0:
        return races[1], races[-1]
    starts, ends, qa, qb = _quote_periods(events)
    last = None  # previous one-tick period
    for k in range(starts.size):
        a, b = qa[k], qb[k]
        if a - b != 1:
            continue
        j = 0
        if last is not None:
            pa, pb = qa[last], qb[last]
            mid = list(zip(qa[last + 1:k], qb[last + 1:k]))
            if (a, b) == (pa + 1, pb + 1) and all(q == (pa + 1, pb) for q in mid):
                j = 1
            elif (a, b) == (pa - 1, pb - 1) and all(q == (pa, pb - 1) for q in mid):
                j = -1
        last = k
        if j == 0 or ends[k] >= n:
            continue
        nxt = (events.book[ends[k], 0], events.book[ends[k], 2])
        if nxt not in ((a + 1, b), (a, b - 1)):
            continue
        race = _build_race(events, starts[k], ends[k], j, a, b, latency)
        if race is not None:
            races[j].append(race)
    return races[1], races[-1]


def _build_race(events, s, e, j, a, b, latency):
    """Rows ``s..e`` inclusive; row ``e`` is the depleting event."""
    t = events.t
    t0, t1 = t[s], t[e]
    if t1 - t0 < latency or (latency == 0 and t1 <= t0):
        return None
    cut = t0 + latency
    rows = np.arange(s, e + 1)
    counted = rows[t[rows] > cut] if latency > 0 else rows[t[rows] > t0]
    counts = np.zeros((2, 3), dtype=np.int64)
    cancel_shares = np.zeros(2)
    kind = events.kind[counted]
    side = events.side[counted]
    price = events.price[counted]
    best = np.where(side == ASK, a, b)
    at_best = price == best
    for sd in (ASK, BID):
        sel = at_best & (side == sd)
        counts[sd, 0] = np.count_nonzero(sel & (kind == MARKET))
        counts[sd, 1] = np.count_nonzero(sel & (kind == LIMIT))
        cc = sel & (kind == CANCEL)
        counts[sd, 2] = np.count_nonzero(cc)
        cancel_shares[sd] = events.size[counted][cc].sum()
    # piecewise-constant volume path from the book after each row up to e-1
    pr = np.arange(s, e)
    pt = t[pr]
    vol = events.book[pr][:, [1, 3]]
    # volume in force at `cut` is the last row with time <= cut
    i0 = int(np.searchsorted(pt, cut, side="right")) - 1
    i0 = max(i0, 0)
    seg_t = np.concatenate(([cut], pt[i0 + 1:], [t1]))
    seg_v = vol[i0:]
    widths = np.diff(seg_t)
    vol_integral = (seg_v * widths[:, None]).sum(axis=0)
    return QueueRace(j, float(t0), float(t1), float(latency), counts, cancel_shares,
                     vol_integral, vol[i0].copy(), pt, vol)


@dataclass(frozen=True, eq=False)
class PoissonEstimate:
    """Rates indexed ``[side, dir]`` plus the sufficient statistics."""

    mu: np.ndarray
    kappa: np.ndarray
    theta: np.ndarray
    n_market: np.ndarray
    n_limit: np.ndarray
    n_cancel: np.ndarray
    duration: np.ndarray  # per direction
    volume: np.ndarray  # unit-size x seconds, [side, dir]
    n_races: tuple[int, int]

    def to_params(self, vol_dist_up, vol_dist_down, rho: float = 1.0, v_bar: int = 9) -> ModelParams:
        return ModelParams(mu=self.mu, kappa=self.kappa, theta=self.theta, vol_dist_up=vol_dist_up,
                           vol_dist_down=vol_dist_down, rho=rho, v_bar=v_bar)

    def table(self) -> dict:
        out = {}
        for s, sn in enumerate(SIDE_NAMES):
            for j in (1, -1):
                d = dir_index(j)
                out[f"{sn},{j:+d}"] = {"mu": float(self.mu[s, d]), "kappa": float(self.kappa[s, d]),
                                       "theta": float(self.theta[s, d])}
        return out


def estimate_poisson(races, unit_sizes) -> PoissonEstimate:
    """Closed-form maximum-likelihood rates from up- and down-races."""
    S_l, S_m, S_c = unit_sizes
    shape = (2, 2)
    nm, nl, nc = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    vol = np.zeros(shape)
    dur = np.zeros(2)
    ups, downs = races
    for j, group in ((1, ups), (-1, downs)):
        d = dir_index(j)
        for r in group:
            nm[:, d] += r.counts[:, 0]
            nl[:, d] += r.counts[:, 1]
            nc[:, d] += r.counts[:, 2]
            vol[:, d] += r.vol_integral / S_l
            dur[d] += r.exposure
    if (dur <= 0).any():
        raise DegenerateData("total race duration is zero for some direction")
    if (vol <= 0).any():
        raise DegenerateData("integrated volume is zero for some side/direction")
    if (nm == 0).any() or (nl == 0).any() or (nc == 0).any():
        raise DegenerateData("no events of some kind for some side/direction")
    mu = nm / dur * (S_m / S_l)
    kappa = nl / dur
    theta = nc / vol * (S_c / S_l)
    return PoissonEstimate(mu, kappa, theta, nm.astype(int), nl.astype(int), nc.astype(int),
                           dur, vol, (len(ups), len(downs)))


@dataclass(frozen=True, eq=False)
class VolumeEstimate:
    up: np.ndarray
    down: np.ndarray
    coverage_up: float
    coverage_down: float


def _units(shares, S_l, rounding):
    x = np.asarray(shares, dtype=float) / S_l
    if rounding == "ceil":
        # guard against float noise on exact multiples
        return np.ceil(x - 1e-9).astype(int)
    if rounding == "half_up":
        return np.floor(x + 0.5).astype(int)
    raise ValueError("rounding must be 'ceil' or 'half_up'")


def estimate_volume_dist(races, S_l: float, N: int = 25, rounding: str = "ceil") -> VolumeEstimate:
    """Empirical post-move ``(v_b, v_a)`` law per direction, truncated to ``{1..N}^2``."""
    out = []
    for group, name in zip(races, ("up", "down")):
        if not group:
            raise DegenerateData(f"no {name} races")
        vols = np.array([r.start_volume for r in group])
        va = _units(vols[:, 0], S_l, rounding)
        vb = _units(vols[:, 1], S_l, rounding)
        keep = (va >= 1) & (va <= N) & (vb >= 1) & (vb <= N)
        cov = keep.mean()
        if not keep.any():
            raise DegenerateData(f"no {name} race starts inside the truncation box")
        f = np.zeros((N, N))
        np.add.at(f, (vb[keep] - 1, va[keep] - 1), 1.0)
        f /= f.sum()
        if cov < 0.95:
            warnings.warn(f"{name}-move volume coverage {cov:.3f} below 0.95", CoverageTooLow,
                          stacklevel=2)
        out.append((f, float(cov)))
    return VolumeEstimate(out[0][0], out[1][0], out[0][1], out[1][1])


def estimate_params(message_paths, orderbook_paths, latency: float = 0.0, N: int = 25,
                    tick: float = 100.0, window=TRADING_WINDOW, rho: float = 1.0, v_bar: int = 9,
                    rounding: str = "ceil"):
    """Full pipeline over a list of daily file pairs; returns ``(params, report)``."""
    ups, downs = [], []
    logs = []
    excluded = {"hidden_execution": 0, "outside_window": 0}
    for mp, op in zip(message_paths, orderbook_paths):
        log = parse_events(mp, op, tick=tick, window=window)
        logs.append(log)
        for k, v in log.excluded.items():
            excluded[k] += v
        u, d = segment_races(log, latency)
        ups += u
        downs += d
    merged = _concat(logs)
    sizes = estimate_unit_sizes(merged)
    rates = estimate_poisson((ups, downs), sizes)
    vols = estimate_volume_dist((ups, downs), sizes[0], N, rounding)
    params = rates.to_params(vols.up, vols.down, rho=rho, v_bar=v_bar)
    report = {
        "unit_sizes": {"limit": sizes[0], "market": sizes[1], "cancel": sizes[2]},
        "races": {"up": len(ups), "down": len(downs)},
        "events": len(merged),
        "excluded": excluded,
        "coverage": {"up": vols.coverage_up, "down": vols.coverage_down},
        "latency": latency,
        "rates": rates.table(),
    }
    return params, report


def _concat(logs: list[EventLog]) -> EventLog:
    if not logs:
        return EventLog([], [], [], [], [], [], np.zeros((0, 4)))
    return EventLog(np.concatenate([l.t for l in logs]), np.concatenate([l.kind for l in logs]),
                    np.concatenate([l.side for l in logs]), np.concatenate([l.size for l in logs]),
                    np.concatenate([l.price for l in logs]), np.concatenate([l.order_id for l in logs]),
                    np.concatenate([l.book for l in logs]))
