"""Instance builders: synthetic grid worlds and a ride-share driver game.

The ride-share model turns trip records into pickup kernels and demand
rates, adds deviation-prone move actions between neighbouring zones, and
prices each (t, s, a) as expected travel cost minus expected fare plus a
linear congestion term.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timedelta
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .game import OFFSET_LINEAR, CostModel, StopRule, solve_equilibrium_fw
from .mdp import Dimensions, InitialDistribution, TransitionKernel
from .tolling import ConstraintSet

log = logging.getLogger(__name__)

EARTH_RADIUS_MI = 3958.8
UNAVAILABLE_COST = 1e3


@dataclass(frozen=True, eq=False)
class Instance:
    kernel: TransitionKernel
    initial: InitialDistribution
    model: CostModel
    constraints: ConstraintSet | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> Dimensions:
        return self.kernel.dims

    @property
    def mass(self) -> float:
        return self.initial.mass

    def with_constraints(self, cons: ConstraintSet) -> "Instance":
        return replace(self, constraints=cons)


def build_capacity_constraints(cap: float, dims: Dimensions, cells=None) -> ConstraintSet:
    """One row ``sum_a y_tsa <= cap`` per (t, s), or per listed ``(t, s)`` cell."""
    if cap <= 0:
        raise ValidationError("capacity must be positive")
    if cells is None:
        cells = [(t, s) for t in range(dims.T + 1) for s in range(dims.S)]
    rows, cols = [], []
    for r, (t, s) in enumerate(cells):
        for a in range(dims.A):
            rows.append(r)
            cols.append(dims.flat_index(t, s, a))
    A = sp.coo_array((np.ones(len(rows)), (rows, cols)), shape=(len(cells), dims.size))
    return ConstraintSet(A.tocsr(), np.full(len(cells), float(cap)))


def zone_loads(y) -> np.ndarray:
    """Drivers present per (t, s)."""
    return np.asarray(y).sum(axis=2)


def choose_capacity(loads, n_violating: int = 3) -> float:
    """Capacity halfway between the n-th and (n+1)-th largest zone peak loads."""
    peaks = np.sort(np.asarray(loads).max(axis=0))[::-1]
    if not 0 < n_violating < peaks.size:
        raise ValidationError("n_violating must be between 1 and S - 1")
    return 0.5 * (peaks[n_violating - 1] + peaks[n_violating])


# -- grid worlds --------------------------------------------------------------

_DIRECTIONS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


def generate_gridworld(rows: int, cols: int, T: int, seed: int = 0,
                       cost_spread: tuple[float, float] = (0.05, 0.5), mass: float = 1.0,
                       slip: float = 0.1, offset_scale: float = 1.0,
                       capacity: float | None = None) -> Instance:
    """Random grid-world congestion game.

    Actions are ``stay`` plus the compass moves along the grid's non-trivial
    axes; a move succeeds with probability ``1 - slip`` and otherwise leaves
    the player in place, while moving off the grid is a stay. Slopes are
    log-uniform over ``cost_spread``, offsets uniform on ``[0, offset_scale]``,
    and the initial mass is spread uniformly.
    """
    if rows * cols < 2:
        raise ValidationError("a grid world needs at least two cells")
    rng = np.random.default_rng(seed)
    moves = [name for name, (dr, dc) in _DIRECTIONS.items()
             if (dr and rows > 1) or (dc and cols > 1)]
    S, A = rows * cols, 1 + len(moves)
    P = np.zeros((T, S, S, A))
    for s in range(S):
        r, c = divmod(s, cols)
        P[:, s, s, 0] = 1.0
        for a, name in enumerate(moves, start=1):
            dr, dc = _DIRECTIONS[name]
            rr, cc = r + dr, c + dc
            if 0 <= rr < rows and 0 <= cc < cols:
                P[:, rr * cols + cc, s, a] += 1.0 - slip
                P[:, s, s, a] += slip
            else:
                P[:, s, s, a] = 1.0
    dims = Dimensions(T, S, A)
    lo, hi = cost_spread
    slope = np.exp(rng.uniform(np.log(lo), np.log(hi), dims.shape))
    offset = rng.uniform(0.0, offset_scale, dims.shape)
    model = CostModel.affine(slope, offset)
    cons = None if capacity is None else build_capacity_constraints(capacity, dims)
    return Instance(TransitionKernel(P), InitialDistribution(np.full(S, mass / S)), model, cons,
                    {"builder": "gridworld", "rows": rows, "cols": cols, "seed": seed})


# -- ride-share -----------------------------------------------------------------

def haversine_miles(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_MI * np.arcsin(np.sqrt(h))


@dataclass(frozen=True, eq=False)
class ZoneGeometry:
    ids: tuple
    lat: np.ndarray
    lon: np.ndarray
    neighbors: tuple  # neighbour indices per zone, sorted

    def __post_init__(self):
        S = len(self.ids)
        if len(self.lat) != S or len(self.lon) != S or len(self.neighbors) != S:
            raise ValidationError("zone fields have inconsistent lengths")
        for s, nbrs in enumerate(self.neighbors):
            for n in nbrs:
                if n == s or s not in self.neighbors[n]:
                    raise ValidationError(f"adjacency between zones {self.ids[s]} and "
                                          f"{self.ids[n]} is not symmetric")

    @property
    def S(self) -> int:
        return len(self.ids)

    @cached_property
    def distance(self) -> np.ndarray:
        """Haversine miles between centroids; a trip within one zone counts as 1 mile."""
        d = haversine_miles(self.lat[:, None], self.lon[:, None], self.lat[None, :],
                            self.lon[None, :])
        np.fill_diagonal(d, 1.0)
        return d

    def index(self, zone_id) -> int:
        return self._lookup[int(zone_id)]

    @cached_property
    def _lookup(self) -> dict:
        return {int(z): i for i, z in enumerate(self.ids)}

    @classmethod
    def grid(cls, rows: int, cols: int, spacing_miles: float = 0.6,
             origin=(40.758, -73.985)) -> "ZoneGeometry":
        """Rectangular block of zones with four-neighbour adjacency."""
        dlat = spacing_miles / 69.0
        dlon = spacing_miles / (69.0 * np.cos(np.radians(origin[0])))
        lat, lon, nbrs = [], [], []
        for s in range(rows * cols):
            r, c = divmod(s, cols)
            lat.append(origin[0] - r * dlat)
            lon.append(origin[1] + c * dlon)
            nbrs.append(tuple(sorted(rr * cols + cc for rr, cc in
                                     ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
                                     if 0 <= rr < rows and 0 <= cc < cols)))
        return cls(tuple(range(1, rows * cols + 1)), np.array(lat), np.array(lon), tuple(nbrs))

    def to_json(self) -> dict:
        return {"zones": [{"id": int(z), "lat": float(self.lat[i]), "lon": float(self.lon[i]),
                           "neighbors": [int(self.ids[n]) for n in self.neighbors[i]]}
                          for i, z in enumerate(self.ids)]}

    @classmethod
    def from_json(cls, doc: dict) -> "ZoneGeometry":
        zones = doc["zones"]
        ids = tuple(int(z["id"]) for z in zones)
        pos = {z: i for i, z in enumerate(ids)}
        nbrs = tuple(tuple(sorted(pos[int(n)] for n in z["neighbors"])) for z in zones)
        return cls(ids, np.array([z["lat"] for z in zones], dtype=float),
                   np.array([z["lon"] for z in zones], dtype=float), nbrs)

    @classmethod
    def load(cls, path) -> "ZoneGeometry":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


@dataclass(frozen=True)
class RideShareParams:
    mu: float = 15.0              # time-money tradeoff multiplying d / velocity
    velocity: float = 8.0         # mph
    fuel_price: float = 2.5       # $/gal
    fuel_eff: float = 20.0        # mi/gal
    delta: float = 0.1            # deviation probability of a move
    trip_minutes: float = 12.0
    T: int = 15
    start_hour: float = 9.0
    base_fare: float = 2.55
    per_minute: float = 0.35
    per_mile: float = 1.75
    min_fare: float = 7.0
    demand_scale: float = 3.0
    omega: float = 0.1            # congestion coefficient of move actions

    def __post_init__(self):
        if not 0 <= self.delta < 1:
            raise ValidationError("delta must lie in [0, 1)")
        money = (self.mu, self.fuel_price, self.base_fare, self.per_minute, self.per_mile,
                 self.min_fare)
        if min(money) < 0:
            raise ValidationError("monetary parameters must be nonnegative")
        if min(self.velocity, self.fuel_eff, self.trip_minutes, self.demand_scale) <= 0:
            raise ValidationError("velocity, efficiency, trip time and demand scale must be positive")
        if self.omega <= 0 or self.T < 1:
            raise ValidationError("omega and T must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "RideShareParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown ride-share parameters {sorted(unknown)}")
        return cls(**doc)


def fare(distance, params: RideShareParams = RideShareParams()):
    return np.maximum(params.min_fare, params.base_fare + params.per_minute * params.trip_minutes
                      + params.per_mile * np.asarray(distance, dtype=float))


def travel_cost(distance, params: RideShareParams = RideShareParams()):
    d = np.asarray(distance, dtype=float)
    return params.mu * d / params.velocity + params.fuel_price * d / params.fuel_eff


@dataclass(frozen=True, eq=False)
class TripRecords:
    """Trip counts ``N[s, s', t]`` per time bin plus the number of days observed."""

    counts: np.ndarray
    n_days: int
    n_rows: int
    n_dropped: int = 0

    @property
    def T(self) -> int:
        return self.counts.shape[2]

    def demand_rate(self, scale: float = 1.0) -> np.ndarray:
        """Rides per bin per day leaving each zone, shape ``(S, T)``."""
        return scale * self.counts.sum(axis=1) / max(self.n_days, 1)


def time_bin(when: datetime, params: RideShareParams) -> int | None:
    start = when.replace(hour=0, minute=0, second=0, microsecond=0) + timedelta(
        hours=params.start_hour)
    minutes = (when - start).total_seconds() / 60.0
    if minutes < 0 or minutes >= params.T * params.trip_minutes:
        return None
    return min(int(minutes // params.trip_minutes), params.T - 1)


def ingest_trips(source, geometry: ZoneGeometry, params: RideShareParams = RideShareParams()
                 ) -> TripRecords:
    """Stream trip rows (CSV path or iterable of dicts) into binned counts.

    Rows need ``origin_zone``, ``dest_zone`` and ``pickup_datetime``; rows
    outside the horizon window or naming unknown zones are dropped.
    """
    counts = np.zeros((geometry.S, geometry.S, params.T))
    days, kept, dropped = set(), 0, 0

    def rows():
        if isinstance(source, (str, Path)):
            with open(source, newline="") as fh:
                yield from csv.DictReader(fh)
        else:
            yield from source

    for row in rows():
        when = datetime.fromisoformat(str(row["pickup_datetime"]))
        days.add(when.date())
        t = time_bin(when, params)
        try:
            o, d = geometry.index(row["origin_zone"]), geometry.index(row["dest_zone"])
        except (KeyError, ValueError):
            t = None
        if t is None:
            dropped += 1
            continue
        counts[o, d, t] += 1
        kept += 1
    return TripRecords(counts, max(len(days), 1), kept, dropped)


def synthetic_trips(geometry: ZoneGeometry, seed: int = 0, n_days: int = 5,
                    base_rate: float = 12.0, hot_zones=None, hot_factor: float = 2.0,
                    params: RideShareParams = RideShareParams(), date="2019-01-07") -> list[dict]:
    """Poisson trip rows with a gravity destination model and a few busy zones.

    Pickup rates are ``base_rate`` per zone and bin, scaled by a random zone
    weight and ``hot_factor`` at ``hot_zones`` (default: three random zones),
    with a mild mid-morning ramp.
    """
    rng = np.random.default_rng(seed)
    S = geometry.S
    weight = rng.uniform(0.6, 1.4, S)
    if hot_zones is None:
        hot_zones = rng.choice(S, size=min(3, S - 1), replace=False)
    weight[list(hot_zones)] *= hot_factor
    d = geometry.distance
    attract = weight[None, :] * np.exp(-d / 1.5)
    dest_p = attract / attract.sum(axis=1, keepdims=True)
    start = datetime.fromisoformat(date) + timedelta(hours=params.start_hour)
    out = []
    for day in range(n_days):
        for t in range(params.T):
            ramp = 1.0 + 0.3 * np.sin(np.pi * t / params.T)
            for s in range(S):
                n = rng.poisson(base_rate * weight[s] * ramp)
                dests = rng.choice(S, size=n, p=dest_p[s])
                offsets = rng.uniform(0, params.trip_minutes * 60, size=n)
                for dst, off in zip(dests, offsets):
                    when = start + timedelta(days=day, minutes=t * params.trip_minutes,
                                             seconds=float(off))
                    out.append({"origin_zone": geometry.ids[s],
                                "dest_zone": geometry.ids[int(dst)],
                                "pickup_datetime": when.strftime("%Y-%m-%d %H:%M:%S")})
    return out


def write_trips_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["origin_zone", "dest_zone", "pickup_datetime"])
        w.writeheader()
        w.writerows(rows)


def build_move_kernel(geometry: ZoneGeometry, delta: float) -> np.ndarray:
    """Landing distribution ``M[dest, src, target]`` of a move from ``src`` toward ``target``.

    The driver reaches ``target`` with probability ``1 - delta`` and otherwise
    lands uniformly on one of the other neighbours of ``src``.
    """
    S = geometry.S
    M = np.zeros((S, S, S))
    for s, nbrs in enumerate(geometry.neighbors):
        if delta > 0 and len(nbrs) < 2:
            raise ValidationError(f"zone {geometry.ids[s]} has fewer than two neighbours; "
                                  "deviation mass has nowhere to go")
        for target in nbrs:
            M[target, s, target] = 1.0 - delta
            for other in nbrs:
                if other != target:
                    M[other, s, target] = delta / (len(nbrs) - 1)
    return M


def build_pickup_kernel(records: TripRecords) -> np.ndarray:
    """Destination distribution ``K[t, dest, src]`` of a pickup, proportional to demand.

    Zones with no recorded demand in a bin fall back to a self-loop.
    """
    N = records.counts  # (src, dest, t)
    total = N.sum(axis=1)  # (src, t)
    S, T = total.shape
    K = np.zeros((T, S, S))
    for t in range(T):
        for s in range(S):
            if total[s, t] > 0:
                K[t, :, s] = N[s, :, t] / total[s, t]
            else:
                log.warning("no demand at zone index %d, bin %d; pickup self-loops", s, t)
                K[t, s, s] = 1.0
    return K


def action_table(geometry: ZoneGeometry) -> np.ndarray:
    """Target zone per ``(s, a)``: ``s`` for pickup, a neighbour for moves, -1 if unavailable."""
    A = 1 + max(len(n) for n in geometry.neighbors)
    table = np.full((geometry.S, A), -1, dtype=int)
    for s, nbrs in enumerate(geometry.neighbors):
        table[s, 0] = s
        table[s, 1:1 + len(nbrs)] = nbrs
    return table


def build_kernel(geometry: ZoneGeometry, records: TripRecords, params: RideShareParams
                 ) -> TransitionKernel:
    T, S = params.T, geometry.S
    if records.T != T:
        raise ValidationError("trip records and parameters disagree on the horizon")
    table = action_table(geometry)
    A = table.shape[1]
    move = build_move_kernel(geometry, params.delta)
    pickup = build_pickup_kernel(records)
    P = np.zeros((T, S, S, A))
    for s in range(S):
        P[:, :, s, 0] = pickup[:, :, s]
        for a in range(1, A):
            target = table[s, a]
            if target >= 0:
                P[:, :, s, a] = move[:, s, target]
            else:
                P[:, s, s, a] = 1.0
    return TransitionKernel(P)


def build_costs(records: TripRecords, geometry: ZoneGeometry, params: RideShareParams,
                kernel: TransitionKernel) -> CostModel:
    """Expected travel cost minus expected fare, plus a linear congestion term.

    Pickups are congested at rate (expected fare) / (demand rate); moves at
    ``omega``. Unavailable padding actions carry a prohibitive offset.
    """
    T, S, A = params.T, geometry.S, kernel.A
    table = action_table(geometry)
    d = geometry.distance  # d[s, s']
    m = fare(d, params)
    trav = travel_cost(d, params)
    rate = records.demand_rate(params.demand_scale)
    if np.any(rate == 0):
        log.warning("%d zone-bins without demand use a unit demand rate", int(np.sum(rate == 0)))
    rate = np.where(rate > 0, rate, 1.0)
    slope = np.full((T + 1, S, A), params.omega)
    offset = np.full((T + 1, S, A), UNAVAILABLE_COST)
    for t in range(T + 1):
        b = min(t, T - 1)
        Pt = kernel.P[b]
        for s in range(S):
            for a in range(A):
                if table[s, a] < 0:
                    continue
                dist = Pt[:, s, a]
                if a == 0:
                    offset[t, s, a] = dist @ (trav[s] - m[s])
                    slope[t, s, a] = (dist @ m[s]) / rate[s, b]
                else:
                    offset[t, s, a] = dist @ trav[s]
    return CostModel(slope, offset, float(slope.min()), OFFSET_LINEAR)


def rideshare_instance(geometry: ZoneGeometry, records: TripRecords,
                       params: RideShareParams = RideShareParams(), mass: float = 10_000.0,
                       capacity: float | None = None) -> Instance:
    kernel = build_kernel(geometry, records, params)
    model = build_costs(records, geometry, params, kernel)
    p = InitialDistribution(np.full(geometry.S, mass / geometry.S))
    cons = None if capacity is None else build_capacity_constraints(capacity, kernel.dims)
    return Instance(kernel, p, model, cons,
                    {"builder": "rideshare", "available": action_table(geometry) >= 0})


def synthetic_rideshare(rows: int = 3, cols: int = 3, seed: int = 0, mass: float = 1000.0,
                        n_days: int = 5, params: RideShareParams = RideShareParams(),
                        capacity: float | None = None, **trip_kw) -> Instance:
    geometry = ZoneGeometry.grid(rows, cols)
    records = ingest_trips(synthetic_trips(geometry, seed, n_days, params=params, **trip_kw),
                           geometry, params)
    inst = rideshare_instance(geometry, records, params, mass, capacity)
    inst.meta.update(seed=seed, geometry=geometry, records=records)
    return inst


def auto_capacity(inst: Instance, n_violating: int = 3, eps_target: float | None = None,
                  max_iters: int = 20_000) -> tuple[float, np.ndarray]:
    """Capacity at which the untolled equilibrium overloads ``n_violating`` zones."""
    eps = 1e-6 * inst.mass if eps_target is None else eps_target
    res = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, StopRule(max_iters, eps),
                               step_rule="pairwise", polish=True)
    return choose_capacity(zone_loads(res.y), n_violating), res.y


# -- scenario configs -------------------------------------------------------------

def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict) or "scenario" not in cfg:
        raise ValidationError("config must be an object with a 'scenario' key")
    cfg["_base"] = str(path.parent)
    return cfg


def _path(cfg, key) -> Path:
    p = Path(cfg[key])
    if not p.is_absolute():
        p = Path(cfg.get("_base", ".")) / p
    if not p.exists():
        raise ValidationError(f"{key} file {p} does not exist")
    return p


def build_instance(cfg: dict, seed: int | None = None) -> Instance:
    """Instance described by a scenario config (see README for the keys)."""
    kind = cfg["scenario"]
    seed = cfg.get("seed", 0) if seed is None else seed
    mass = float(cfg.get("mass", 1.0 if kind == "gridworld" else 10_000.0))
    cap = cfg.get("capacity")
    if kind == "gridworld":
        spread = tuple(cfg.get("cost_spread", (0.05, 0.5)))
        inst = generate_gridworld(int(cfg.get("rows", 3)), int(cfg.get("cols", 3)),
                                  int(cfg.get("horizon", 15)), seed, spread, mass,
                                  float(cfg.get("slip", 0.1)),
                                  float(cfg.get("offset_scale", 1.0)))
    elif kind == "rideshare":
        params = RideShareParams.from_dict(dict(cfg.get("params", {}),
                                                **({"T": int(cfg["horizon"])}
                                                   if "horizon" in cfg else {})))
        if "geometry" in cfg:
            geometry = ZoneGeometry.load(_path(cfg, "geometry"))
        else:
            geometry = ZoneGeometry.grid(int(cfg.get("rows", 3)), int(cfg.get("cols", 3)))
        if "trips" in cfg:
            source = _path(cfg, "trips")
        else:
            source = synthetic_trips(geometry, seed, int(cfg.get("days", 5)), params=params)
        records = ingest_trips(source, geometry, params)
        inst = rideshare_instance(geometry, records, params, mass)
    else:
        raise ValidationError(f"unknown scenario {kind!r}")
    if cap is None:
        return inst
    if isinstance(cap, str) and cap.startswith("auto"):
        _, _, n = cap.partition(":")
        cap, _ = auto_capacity(inst, int(n or 3))
    cap = float(cap)
    inst.meta["capacity"] = cap
    return inst.with_constraints(build_capacity_constraints(cap, inst.dims))
