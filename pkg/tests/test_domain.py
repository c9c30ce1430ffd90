import pytest
from hypothesis import given, strategies as st

from lorasim.domain import (
    Adapter,
    Assignment,
    OperatingPointTable,
    Request,
    RouteEntry,
    RoutingTable,
    validate_routing_table,
)


def test_adapter_validation():
    Adapter(id="a", rank=8, size_bytes=1)
    with pytest.raises(ValueError):
        Adapter(id="a", rank=0, size_bytes=1)
    with pytest.raises(ValueError):
        Adapter(id="a", rank=8, size_bytes=0)


def test_request_validation():
    Request(request_id="r", adapter="a", prompt_length=1, output_length=1, arrival_time=0.0)
    with pytest.raises(ValueError):
        Request(request_id="r", adapter="a", prompt_length=0, output_length=1, arrival_time=0.0)
    with pytest.raises(ValueError):
        Request(request_id="r", adapter="a", prompt_length=1, output_length=0, arrival_time=0.0)
    with pytest.raises(ValueError):
        Request(request_id="r", adapter="a", prompt_length=1, output_length=1, arrival_time=-1.0)


class TestValidateRoutingTable:
    def test_split_route_ok(self):
        table = RoutingTable.build({"A3": [(1, 0.7), (2, 0.3)]})
        assert validate_routing_table(table) == []

    def test_single_full_route_ok(self):
        table = RoutingTable.build({"A1": [(0, 1.0)]})
        assert validate_routing_table(table) == []

    def test_sum_above_one_is_violation(self):
        table = RoutingTable(routes={"A1": (RouteEntry(0, 0.6), RouteEntry(1, 0.6))})
        violations = validate_routing_table(table)
        assert len(violations) == 1
        assert "sum(phi)=1.2" in violations[0] and "A1" in violations[0]

    def test_duplicate_server_is_violation(self):
        table = RoutingTable(routes={"A1": (RouteEntry(0, 0.5), RouteEntry(0, 0.5))})
        assert any("duplicate" in v for v in validate_routing_table(table))

    def test_missing_cluster_adapter_reported(self):
        table = RoutingTable.build({"A1": [(0, 1.0)]})
        violations = validate_routing_table(table, cluster_adapters=["A1", "A2"])
        assert violations == ["no route entries for A2"]


class TestRoutingTableBuild:
    def test_renormalizes_small_drift(self):
        table = RoutingTable.build({"A": [(0, 0.5 + 3e-7), (1, 0.5 + 3e-7)]})
        assert sum(e.phi for e in table.routes["A"]) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_large_drift(self):
        with pytest.raises(ValueError):
            RoutingTable.build({"A": [(0, 0.6), (1, 0.6)]})

    def test_rejects_duplicate_servers(self):
        with pytest.raises(ValueError):
            RoutingTable.build({"A": [(0, 0.5), (0, 0.5)]})

    def test_rejects_empty_entries(self):
        with pytest.raises(ValueError):
            RoutingTable.build({"A": []})


@st.composite
def assignments(draw):
    num_servers = draw(st.integers(1, 6))
    num_adapters = draw(st.integers(1, 12))
    per_server = {s: [] for s in range(num_servers)}
    for i in range(num_adapters):
        holders = draw(
            st.lists(st.integers(0, num_servers - 1), min_size=1,
                     max_size=num_servers, unique=True)
        )
        weights = draw(
            st.lists(st.floats(0.05, 1.0), min_size=len(holders),
                     max_size=len(holders))
        )
        total = sum(weights)
        for server, w in zip(holders, weights):
            per_server[server].append((f"a{i}", w / total))
    return Assignment(per_server=per_server)


@given(assignments())
def test_assignment_routing_round_trip(assignment):
    routes = assignment.to_routes()
    back = Assignment.from_routes(routes, servers=assignment.per_server)
    original = {
        (s, a, phi)
        for s, bundle in assignment.per_server.items()
        for a, phi in bundle
    }
    recovered = {
        (s, a, phi)
        for s, bundle in back.per_server.items()
        for a, phi in bundle
    }
    assert original == recovered


@given(assignments())
def test_valid_assignment_transposes_to_valid_table(assignment):
    table = RoutingTable.build(assignment.to_routes())
    assert validate_routing_table(table) == []


class TestOperatingPointTable:
    def test_non_increasing_accepted(self):
        OperatingPointTable(max_tps={8: 2000.0, 64: 1500.0, 128: 1500.0})

    def test_increasing_rejected(self):
        with pytest.raises(ValueError):
            OperatingPointTable(max_tps={8: 1000.0, 128: 2000.0})

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            OperatingPointTable(max_tps={8: 0.0})
