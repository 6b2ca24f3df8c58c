import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgefed.autodiff import ContractError
from edgefed.federation import (
    LEI,
    adjacency,
    build_config,
    edge_counts,
    from_groups,
    load_federation,
    reassign_broker,
    resolve_topology,
    save_federation,
    topology_graph,
)


def test_reference_configs():
    c1, c2, c3 = build_config(1), build_config(2), build_config(3)
    assert c1.H == c2.H == 16
    # the quoted group sizes 2, 4, 4, 8 sum to 18 hosts
    assert c3.H == 18
    assert len(c1.leis) == 16 and len(set(c1.brokers)) == 16
    assert c2.lei_sizes == (4, 4, 4, 4)
    assert c3.lei_sizes == (2, 4, 4, 8)
    assert {h.ram_mb for h in c2.hosts if h.lei_id == 0} == {4096}
    assert {h.ram_mb for h in c2.hosts if h.lei_id == 1} == {8192}
    assert {h.ram_mb for h in c3.hosts if h.lei_id == 3} == {8192}
    for c in (c1, c2):
        assert sum(h.ram_mb == 4096 for h in c.hosts) == 8
    with pytest.raises(ContractError):
        build_config(4)


def test_custom_single_lei():
    spec = from_groups([2], [[4096, 8192]])
    assert len(spec.leis) == 1 and spec.brokers == (0,)


def test_edge_counts():
    assert edge_counts(build_config(2)) == (12, 6)
    assert edge_counts(build_config(1)) == (0, 120)
    assert edge_counts(build_config(3))[0] == 14


def test_reassign_broker():
    lei = LEI(0, 0, (1, 2, 3))
    util = {0: 1.0, 1: 0.9, 2: 0.2, 3: 0.5}
    assert reassign_broker(lei, util).broker == 2
    assert reassign_broker(lei, {0: 1.0, 1: 0.2, 2: 0.2, 3: 0.9}).broker == 1
    assert reassign_broker(LEI(0, 0, ()), {0: 0.0}).dead


def test_power_and_capacity_validation():
    from edgefed.federation import HostSpec

    with pytest.raises(ContractError):
        HostSpec(0, 0, cpu_capacity=0.0)
    with pytest.raises(ContractError):
        HostSpec(0, 0, power_idle_w=9.0, power_max_w=7.0)


def test_transfer_time():
    spec = build_config(2)
    # 100 MB over 1 Gbps WAN: 0.8 s plus 50 ms latency
    assert spec.transfer_time(100, 0, 4) == pytest.approx(0.85)
    assert spec.transfer_time(100, 0, 1) == pytest.approx(0.801)


def test_config_file_round_trip(tmp_path):
    spec = build_config(3)
    p = tmp_path / "fed.json"
    save_federation(spec, p)
    assert load_federation(p) == spec
    assert resolve_topology(str(p)) == spec
    assert resolve_topology("2") == build_config(2)


def test_graph_focus_and_features():
    spec = build_config(3)
    G = topology_graph(spec, np.ones((18, 3)), focus_lei=3)
    np.testing.assert_array_equal(G.focus, np.arange(10, 18))
    assert G.features.shape == (18, 3) and G.n_hosts == 18


@settings(max_examples=200)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=6), st.data())
def test_broker_uniqueness_and_symmetry_under_failures(sizes, data):
    spec = from_groups(sizes, [[4096] * s for s in sizes])
    brokers = list(spec.brokers)
    failed = set()
    for _ in range(data.draw(st.integers(0, 8))):
        lid = data.draw(st.integers(0, len(sizes) - 1))
        lei = spec.leis[lid]
        if brokers[lid] is None:
            continue
        failed.add(brokers[lid])
        cur = LEI(lid, brokers[lid], tuple(h for h in lei.hosts if h != brokers[lid]))
        util = {h: data.draw(st.floats(0, 1)) for h in lei.hosts}
        new = reassign_broker(cur, util, failed)
        brokers[lid] = None if new.dead else new.broker
        if not new.dead:
            assert new.broker not in failed and new.broker in lei.hosts
            assert sorted(new.hosts) == sorted(lei.hosts)
    live = [b for b in brokers if b is not None]
    assert len(set(live)) == len(live)
    wb, bb = adjacency(spec, [b if b is not None else spec.leis[i].broker for i, b in enumerate(brokers)])
    for A in (wb, bb):
        np.testing.assert_array_equal(A, A.T)
        assert not np.any(np.diag(A))
    # every worker has exactly one broker edge
    bset = {b if b is not None else spec.leis[i].broker for i, b in enumerate(brokers)}
    for h in range(spec.H):
        if h not in bset:
            assert wb[h].sum() == 1
