"""Domain types, admissibility rules and reward functions.

Conventions used throughout the package:

* sides are indexed ``ASK = 0`` and ``BID = 1``;
* price-move directions ``j = +1`` / ``j = -1`` are stored at index 0 / 1
  (see :func:`dir_index`);
* volumes are in unit size, prices in ticks, times in seconds;
* volume pmfs are dense ``N x N`` arrays, row ``v_b - 1``, column ``v_a - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

ASK, BID = 0, 1
SIDES = ("ask", "bid")
DIRECTIONS = (+1, -1)
_DIR_NAMES = {+1: "up", -1: "down"}

# p - 1 >= 1 keeps the bid price positive
P_REF = 2


def dir_index(j: int) -> int:
    if j == 1:
        return 0
    if j == -1:
        return 1
    raise ValueError(f"direction must be +1 or -1, got {j!r}")


class Action(NamedTuple):
    """Market order size ``m`` and limit order size ``l`` (unit size)."""

    m: int
    l: int


class ReducedRaceKey(NamedTuple):
    j: int
    v_b: int
    v_a: int
    m: int
    l: int

    @property
    def bid_start(self) -> int:
        """Bid volume left once the agent's market order has been filled."""
        return self.v_b - self.m


@dataclass(frozen=True)
class SystemState:
    j: int
    v_b: int
    v_a: int
    p: int
    z: int
    y: int

    def __post_init__(self):
        if self.j not in (1, -1):
            raise ValueError(f"j must be +1 or -1, got {self.j}")
        if self.v_b < 1 or self.v_a < 1:
            raise ValueError("best queues are never empty at a decision epoch")
        if self.z < 0 or self.y < 0:
            raise ValueError("z and y must be non-negative")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Poisson rates, post-move volume laws and tick/lot economics.

    ``mu``, ``kappa`` and ``theta`` are ``(2, 2)`` arrays indexed
    ``[side, dir_index(j)]``.
    """

    mu: np.ndarray
    kappa: np.ndarray
    theta: np.ndarray
    vol_dist_up: np.ndarray
    vol_dist_down: np.ndarray
    rho: float = 1.0
    v_bar: int = 9

    def __post_init__(self):
        for name in ("mu", "kappa", "theta"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (2, 2):
                raise ValueError(f"{name} must have shape (2, 2)")
            if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"all {name} rates must be finite and > 0")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        n = None
        for name in ("vol_dist_up", "vol_dist_down"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
                raise ValueError(f"{name} must be a square N x N array")
            if n is not None and arr.shape[0] != n:
                raise ValueError("volume distributions must share N")
            n = arr.shape[0]
            if np.any(arr < 0):
                raise ValueError(f"{name} has negative mass")
            if abs(arr.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} sums to {arr.sum()!r}, not 1")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if int(self.v_bar) != self.v_bar or self.v_bar < 1:
            raise ValueError("v_bar must be a positive integer")
        object.__setattr__(self, "v_bar", int(self.v_bar))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def N(self) -> int:
        return self.vol_dist_up.shape[0]

    def side_rates(self, side: int, j: int) -> tuple[float, float, float]:
        """``(kappa, mu, theta)`` for ``side`` in a race following move ``j``."""
        d = dir_index(j)
        return float(self.kappa[side, d]), float(self.mu[side, d]), float(self.theta[side, d])

    def vol_dist(self, j: int) -> np.ndarray:
        return self.vol_dist_up if j == 1 else self.vol_dist_down

    @property
    def iota(self) -> float:
        """Largest single-unit depletion rate ``mu + theta`` over sides and directions."""
        return float(np.max(self.mu + self.theta))

    def replace(self, **changes) -> "ModelParams":
        fields = dict(
            mu=self.mu, kappa=self.kappa, theta=self.theta,
            vol_dist_up=self.vol_dist_up, vol_dist_down=self.vol_dist_down,
            rho=self.rho, v_bar=self.v_bar,
        )
        fields.update(changes)
        return ModelParams(**fields)

    def to_dict(self) -> dict:
        rates = {}
        for s, side in enumerate(SIDES):
            rates[side] = {}
            for j in DIRECTIONS:
                d = dir_index(j)
                rates[side][_DIR_NAMES[j]] = {
                    "mu": float(self.mu[s, d]),
                    "kappa": float(self.kappa[s, d]),
                    "theta": float(self.theta[s, d]),
                }
        return {
            "rates": rates,
            "vol_dist_up": self.vol_dist_up.tolist(),
            "vol_dist_down": self.vol_dist_down.tolist(),
            "N": self.N,
            "rho": self.rho,
            "v_bar": self.v_bar,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParams":
        allowed = {"rates", "vol_dist_up", "vol_dist_down", "N", "rho", "v_bar", "provenance"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown keys in params document: {sorted(unknown)}")
        mu = np.zeros((2, 2))
        kappa = np.zeros((2, 2))
        theta = np.zeros((2, 2))
        for s, side in enumerate(SIDES):
            for j in DIRECTIONS:
                block = doc["rates"][side][_DIR_NAMES[j]]
                d = dir_index(j)
                mu[s, d] = block["mu"]
                kappa[s, d] = block["kappa"]
                theta[s, d] = block["theta"]
        params = cls(
            mu=mu, kappa=kappa, theta=theta,
            vol_dist_up=np.asarray(doc["vol_dist_up"], dtype=float),
            vol_dist_down=np.asarray(doc["vol_dist_down"], dtype=float),
            rho=doc.get("rho", 1.0), v_bar=doc.get("v_bar", 9),
        )
        if "N" in doc and int(doc["N"]) != params.N:
            raise ValueError(f"N={doc['N']} does not match the {params.N}x{params.N} volume arrays")
        return params

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def admissible_actions(state: SystemState, m_max: int, l_max: int) -> list[Action]:
    """All ``(m, l)`` with ``m < v_b`` and ``m + l <= y``, sorted by ``(m, l)``."""
    out = []
    for m in range(0, min(m_max, state.v_b - 1, state.y) + 1):
        for l in range(0, min(l_max, state.y - m) + 1):
            out.append(Action(m, l))
    return out


def periodic_reward(state: SystemState, action: Action, rho: float) -> float:
    """Lump-sum payoff at a decision epoch.

    The market order fills at the bid ``p - 1``; the ``z`` units of the
    previous limit order filled at the previous ask ``p - j``.
    """
    m = action.m
    return rho * (m * (state.p - 1) + state.z * (state.p - state.j))


def impact(x: int, rho: float, v_bar: int) -> float:
    return rho * x / v_bar


def terminal_reward(state: SystemState, action: Action, z_exec: int,
                    rho: float, v_bar: int) -> float:
    """Payoff at maturity after ``z_exec`` units of the last limit order filled."""
    if z_exec < 0:
        raise ValueError("z_exec must be non-negative")
    if z_exec > action.l:
        raise ValueError(f"z_exec={z_exec} exceeds the posted limit size l={action.l}")
    rest = state.y - action.m
    if z_exec > rest:
        raise ValueError("executed quantity exceeds remaining inventory")
    units = (state.p - 1) * rest + z_exec
    return rho * units - impact(rest - z_exec, rho, v_bar)
