import logging
from datetime import datetime

import numpy as np
import pytest

from mdpcg.errors import ValidationError
from mdpcg.mdp import TransitionKernel, check_feasibility
from mdpcg.scenario import (RideShareParams, TripRecords, ZoneGeometry, action_table,
                            build_capacity_constraints, build_instance, build_move_kernel,
                            build_pickup_kernel, choose_capacity, fare, generate_gridworld,
                            haversine_miles, ingest_trips, synthetic_rideshare, synthetic_trips,
                            time_bin, travel_cost, write_trips_csv)
from mdpcg.mdp import Dimensions


@pytest.fixture(scope="module")
def small_rideshare():
    return synthetic_rideshare(3, 3, seed=0, mass=1000.0, n_days=2)


# -- costs ----------------------------------------------------------------------

def test_fare_examples():
    assert fare(1.0) == pytest.approx(8.5)
    assert fare(0.1) == 7.0


def test_travel_cost_example():
    assert travel_cost(2.0) == pytest.approx(4.0)


def test_params_validation():
    with pytest.raises(ValidationError):
        RideShareParams(delta=1.0)
    with pytest.raises(ValidationError):
        RideShareParams(fuel_price=-1)
    with pytest.raises(ValidationError):
        RideShareParams.from_dict({"speed": 3})
    assert RideShareParams.from_dict({"omega": 0.2}).omega == 0.2


# -- geometry -----------------------------------------------------------------------

def test_grid_geometry(tmp_path):
    g = ZoneGeometry.grid(3, 3)
    assert g.S == 9
    assert np.all(np.diag(g.distance) == 1.0)
    off = g.distance[~np.eye(9, dtype=bool)]
    assert np.all(off > 0)
    assert g.distance[0, 1] == pytest.approx(0.6, rel=5e-3)  # spacing uses 69 mi per degree
    for s, nbrs in enumerate(g.neighbors):
        assert all(s in g.neighbors[n] for n in nbrs)
    g.save(tmp_path / "g.json")
    back = ZoneGeometry.load(tmp_path / "g.json")
    assert back.ids == g.ids and back.neighbors == g.neighbors


def test_haversine_known_distance():
    # one degree of latitude is about 69.1 miles
    assert haversine_miles(40.0, -74.0, 41.0, -74.0) == pytest.approx(69.09, rel=1e-3)


def test_asymmetric_adjacency_rejected():
    with pytest.raises(ValidationError):
        ZoneGeometry((1, 2), np.zeros(2), np.zeros(2), ((1,), ()))


# -- kernels ------------------------------------------------------------------------

def test_move_kernel_deviation():
    g = ZoneGeometry.grid(3, 3)
    M = build_move_kernel(g, 0.1)
    centre = 4  # four neighbours
    edge = 1    # neighbours 0, 2, 4
    np.testing.assert_allclose(M[:, edge, 4][[4, 0, 2]], [0.9, 0.05, 0.05])
    assert M[:, centre, 1][1] == pytest.approx(0.9)
    for s, nbrs in enumerate(g.neighbors):
        for n in nbrs:
            assert M[:, s, n].sum() == pytest.approx(1.0, abs=1e-15)
    D = build_move_kernel(g, 0.0)
    assert D[2, 1, 2] == 1.0 and D[:, 1, 2].sum() == 1.0


def test_move_kernel_needs_two_neighbours():
    g = ZoneGeometry.grid(1, 2)
    with pytest.raises(ValidationError):
        build_move_kernel(g, 0.1)
    build_move_kernel(g, 0.0)


def test_pickup_kernel_examples(caplog):
    N = np.zeros((2, 2, 2))
    N[0, 1, 0] = 5          # all demand from zone 0 goes to zone 1
    N[1, :, 0] = [3, 1]
    N[0, :, 1] = [1, 1]
    N[1, :, 1] = [0, 0]     # empty bin
    rec = TripRecords(N, 1, int(N.sum()))
    with caplog.at_level(logging.WARNING):
        K = build_pickup_kernel(rec)
    np.testing.assert_array_equal(K[0, :, 0], [0, 1])
    np.testing.assert_allclose(K[0, :, 1], [0.75, 0.25])
    np.testing.assert_array_equal(K[1, :, 1], [0, 1])
    assert "no demand" in caplog.text


def test_rideshare_kernel_and_costs(small_rideshare):
    inst = small_rideshare
    P = inst.kernel.P
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    TransitionKernel(P)
    assert inst.dims.T == 15 and inst.dims.S == 9 and inst.dims.A == 5
    m = inst.model
    assert m.alpha == pytest.approx(m.slope.min()) and m.alpha > 0
    avail = inst.meta["available"]
    move = np.broadcast_to(avail, m.shape).copy()
    move[..., 0] = False
    np.testing.assert_array_equal(m.slope[move], 0.1)
    np.testing.assert_allclose(inst.initial.p, 1000.0 / 9)


def test_pickup_cost_formula(small_rideshare):
    inst = small_rideshare
    g, rec = inst.meta["geometry"], inst.meta["records"]
    params = RideShareParams()
    t, s = 3, 4
    dist = inst.kernel.P[t, :, s, 0]
    m = fare(g.distance[s], params)
    trav = travel_cost(g.distance[s], params)
    rate = rec.demand_rate(params.demand_scale)[s, t]
    assert inst.model.offset[t, s, 0] == pytest.approx(dist @ (trav - m), rel=1e-12)
    assert inst.model.slope[t, s, 0] == pytest.approx((dist @ m) / rate, rel=1e-12)


def test_capacity_constraints_shape():
    cons = build_capacity_constraints(3.0, Dimensions(1, 2, 2))
    assert cons.A.shape == (4, 8)
    np.testing.assert_array_equal(cons.A.toarray().sum(axis=1), 2)
    np.testing.assert_array_equal(cons.A.toarray().sum(axis=0), 1)
    with pytest.raises(ValidationError):
        build_capacity_constraints(0.0, Dimensions(1, 2, 2))


def test_capacity_slack_below_cap():
    d = Dimensions(1, 2, 2)
    cons = build_capacity_constraints(400.0, d)
    y = np.full(d.shape, 199.5)  # zone loads 399
    assert np.all(cons.residual(y) < 0)


def test_choose_capacity():
    loads = np.array([[5.0, 1.0, 3.0, 2.0], [4.0, 6.0, 1.0, 2.5]])
    # peaks 5, 6, 3, 2.5 -> between the 2nd (5) and 3rd (3) largest
    assert choose_capacity(loads, 2) == 4.0
    with pytest.raises(ValidationError):
        choose_capacity(loads, 4)


# -- grid worlds ----------------------------------------------------------------------

def test_gridworld_shapes():
    inst = generate_gridworld(3, 3, 15, seed=0)
    assert inst.dims.S == 9 and inst.dims.A <= 5
    inst = generate_gridworld(1, 2, 2, seed=0)
    assert inst.dims.S == 2 and inst.dims.A == 3
    np.testing.assert_allclose(inst.initial.p, 0.5)
    with pytest.raises(ValidationError):
        generate_gridworld(1, 1, 2)


def test_gridworld_deterministic():
    a, b = generate_gridworld(2, 3, 4, seed=9), generate_gridworld(2, 3, 4, seed=9)
    assert a.kernel.P.tobytes() == b.kernel.P.tobytes()
    assert a.model.slope.tobytes() == b.model.slope.tobytes()
    assert a.model.offset.tobytes() == b.model.offset.tobytes()
    c = generate_gridworld(2, 3, 4, seed=10)
    assert c.model.slope.tobytes() != a.model.slope.tobytes()


def test_gridworld_cost_spread():
    inst = generate_gridworld(3, 3, 5, seed=1)
    assert 0.05 <= inst.model.slope.min() and inst.model.slope.max() <= 0.5
    assert inst.model.alpha == inst.model.slope.min()


# -- ingestion ------------------------------------------------------------------------

def test_time_binning():
    p = RideShareParams()
    assert time_bin(datetime(2019, 1, 7, 9, 0), p) == 0
    assert time_bin(datetime(2019, 1, 7, 9, 11, 59), p) == 0
    assert time_bin(datetime(2019, 1, 7, 9, 12), p) == 1
    assert time_bin(datetime(2019, 1, 7, 11, 59, 59), p) == 14
    assert time_bin(datetime(2019, 1, 7, 8, 59), p) is None
    assert time_bin(datetime(2019, 1, 7, 12, 0), p) is None


def test_ingestion_conserves_counts(tmp_path):
    g = ZoneGeometry.grid(2, 2)
    rows = synthetic_trips(g, seed=3, n_days=2)
    rows += [{"origin_zone": 1, "dest_zone": 2, "pickup_datetime": "2019-01-07 08:30:00"},
             {"origin_zone": 1, "dest_zone": 99, "pickup_datetime": "2019-01-07 10:00:00"},
             {"origin_zone": 3, "dest_zone": 4, "pickup_datetime": "2019-01-07 12:30:00"}]
    write_trips_csv(tmp_path / "trips.csv", rows)
    rec = ingest_trips(tmp_path / "trips.csv", g)
    assert rec.counts.sum() == rec.n_rows == len(rows) - 3
    assert rec.n_dropped == 3
    assert rec.counts.shape == (4, 4, 15) and rec.n_days == 2
    assert np.all(rec.counts >= 0)
    from mdpcg.scenario import build_kernel
    K = build_kernel(g, rec, RideShareParams(delta=0.0))
    np.testing.assert_allclose(K.P.sum(axis=1), 1.0, atol=1e-12)


def test_zero_demand_fallback(caplog):
    g = ZoneGeometry.grid(2, 2)
    rows = [{"origin_zone": 1, "dest_zone": 2, "pickup_datetime": "2019-01-07 09:05:00"}]
    from mdpcg.scenario import rideshare_instance
    rec = ingest_trips(rows, g)
    with caplog.at_level(logging.WARNING):
        inst = rideshare_instance(g, rec, RideShareParams(delta=0.0), mass=10.0)
    assert "unit demand rate" in caplog.text
    assert inst.kernel.P[0, 1, 0, 0] == 1.0     # the one recorded trip
    assert inst.kernel.P[0, 1, 1, 0] == 1.0     # empty bin self-loops
    fare_mean = inst.kernel.P[3, :, 2, 0] @ fare(g.distance[2])
    assert inst.model.slope[3, 2, 0] == pytest.approx(fare_mean / 1.0)


def test_action_table_padding():
    g = ZoneGeometry.grid(3, 3)
    table = action_table(g)
    assert table.shape == (9, 5)
    assert list(table[0]) == [0, 1, 3, -1, -1]


# -- configs ----------------------------------------------------------------------------

def test_build_instance_from_config(tmp_path):
    cfg = {"scenario": "gridworld", "rows": 1, "cols": 3, "horizon": 2, "capacity": 0.4}
    inst = build_instance(cfg, seed=4)
    assert inst.constraints.C == 9 and inst.meta["capacity"] == 0.4
    cfg = {"scenario": "gridworld", "rows": 2, "cols": 2, "horizon": 2, "capacity": "auto:1"}
    inst = build_instance(cfg, seed=0)
    assert inst.meta["capacity"] > 0
    with pytest.raises(ValidationError):
        build_instance({"scenario": "highway"})
    with pytest.raises(ValidationError):
        build_instance({"scenario": "rideshare", "trips": str(tmp_path / "none.csv")})


def test_rideshare_config_feasible(small_rideshare):
    from mdpcg.mdp import rollout_policy
    inst = small_rideshare
    pi = np.zeros(inst.dims.shape)
    pi[..., 0] = 1.0
    assert check_feasibility(rollout_policy(pi, inst.kernel, inst.initial), inst.kernel,
                             inst.initial)
