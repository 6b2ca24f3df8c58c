import copy

import numpy as np
import pytest

from edgefed.autodiff import ContractError
from edgefed.federation import HostSpec, build_config, from_groups
from edgefed.simulator import (
    SimConfig,
    begin_interval,
    energy_model,
    fitness,
    fitness_value,
    init_state,
    qos_term,
    schedule_pending,
    sim_qos,
    step,
)
from edgefed.workload import FaultEvent, FaultModel, Task


def quiet_cfg(**kw):
    return SimConfig(arrival_rate=0.0, fault_model=FaultModel(rate=0.0), **kw)


def add_task(st, tid, work, lei=0, ram=100.0, state=100.0):
    st.tasks[tid] = Task(tid, 0, st.t, work, work, ram, state, 0.0, 0.0, 600.0, lei)
    st.next_task_id = max(st.next_task_id, tid + 1)


def test_single_task_completes_in_one_interval():
    spec = from_groups([1], [[4096]])
    st = init_state(spec, quiet_cfg())
    add_task(st, 0, 1.0)
    nxt, out = step(st, {0: 0})
    assert [c.task_id for c in out.completions] == [0]
    assert out.completions[0].response_s == pytest.approx(300.0)
    assert out.host_features[0, 0] == pytest.approx(1.0)


def test_processor_sharing_halves_progress():
    spec = from_groups([1], [[4096]])
    st = init_state(spec, quiet_cfg())
    add_task(st, 0, 2.0)
    add_task(st, 1, 2.0)
    nxt, out = step(st, {0: 0, 1: 0})
    assert nxt.tasks[0].remaining_work == pytest.approx(1.5)
    assert nxt.tasks[1].remaining_work == pytest.approx(1.5)
    assert out.work_done[0] == pytest.approx(1.0)


def test_migration_freezes_for_transfer_time():
    spec = build_config(2)
    st = init_state(spec, quiet_cfg())
    add_task(st, 0, 5.0, state=100.0)
    st, _ = step(st, {0: 0})
    nxt, out = step(st, {}, {0: 4})
    assert out.migration_times == [pytest.approx(0.85)]
    assert nxt.tasks[0].host == 4 and nxt.tasks[0].lei == 1
    assert nxt.tasks[0].migrations == 1


def test_migration_decision_invariants():
    spec = build_config(2)
    st = init_state(spec, quiet_cfg())
    add_task(st, 0, 5.0)
    st, _ = step(st, {0: 0})
    with pytest.raises(ContractError):
        step(st, {}, [(0, 4), (0, 5)])
    with pytest.raises(ContractError):
        step(st, {}, {0: 1})  # same LEI
    with pytest.raises(ContractError):
        step(st, {}, {0: 99})
    with pytest.raises(ContractError):
        step(st, {}, {7: 4})
    st.host_down[4] = 1
    with pytest.raises(ContractError):
        step(st, {}, {0: 4})


def test_redundant_migration_rejected_fitness_unchanged():
    spec = build_config(2)
    st = init_state(spec, quiet_cfg())
    add_task(st, 0, 5.0)
    st, _ = step(st, {0: 0})
    f1 = fitness(st, {0: 4})[0]
    with pytest.raises(ContractError):
        fitness(st, [(0, 4), (0, 4)])
    assert fitness(st, {0: 4})[0] == f1


def test_qos_examples():
    cfg = SimConfig(qos_mode="signed")
    assert qos_term(0.4, 0.2, cfg) == pytest.approx(0.1)
    assert qos_term(0.4, 0.2, SimConfig()) == pytest.approx(0.3)
    assert fitness_value(0.1, 2, 16, 0.3, SimConfig()) == pytest.approx(0.3125)
    with pytest.raises(ContractError):
        SimConfig(qos_mode="other")


def test_idle_qos():
    spec = build_config(2)
    st = init_state(spec, quiet_cfg())
    q = sim_qos(st)
    assert q.art == 0.0
    assert q.aec == pytest.approx(sum(h.power_idle_w for h in spec.hosts) / sum(h.power_max_w for h in spec.hosts))


def test_fitness_without_penalties_equals_qos():
    spec = build_config(2)
    st = init_state(spec, quiet_cfg())
    add_task(st, 0, 0.5)
    val, rec, _ = fitness(st, {}, {0: 0})
    assert val == pytest.approx(rec.qos)


def test_energy_model_examples():
    h = HostSpec(0, 0, power_idle_w=3.0, power_max_w=8.0)
    assert energy_model(h, 0.0) == 3.0
    assert energy_model(h, 1.0) == 8.0
    assert energy_model(h, 0.5) == pytest.approx(5.5)
    assert energy_model(h, 1.4) == 8.0


def test_dead_host_placement_restarts_task():
    spec = build_config(2)
    st = init_state(spec, quiet_cfg())
    add_task(st, 0, 1.0)
    st.host_down[0] = 2
    nxt, _ = step(st, {0: 0})
    assert nxt.tasks[0].status == "failed" and nxt.tasks[0].restarts == 1 and nxt.tasks[0].host is None


def test_fault_inflates_designated_feature():
    spec = from_groups([1], [[4096]])
    for ftype, col in (("cpu_overload", 0), ("ram_contention", 1), ("disk_attack", 3), ("ddos_attack", 4)):
        st = init_state(spec, quiet_cfg(crash_prob=0.0))
        base = step(st)[1].host_features[0]
        st.faults.append(FaultEvent(ftype, 0, 0, 3, 1.0))
        feat = step(st)[1].host_features[0]
        changed = set(np.nonzero(~np.isclose(feat, base))[0])
        expect = {1, 2} if ftype == "ram_contention" else {col}
        assert changed == expect, ftype


def test_sim_qos_and_fitness_leave_live_state_untouched():
    spec = build_config(2)
    st = init_state(spec, SimConfig(), seed=3)
    for _ in range(5):
        begin_interval(st)
        st, _ = step(st, schedule_pending(st))
    begin_interval(st)
    S = schedule_pending(st)
    snap = copy.deepcopy(st)
    sim_qos(st, {}, S)
    fitness(st, {}, S)
    step(st, S)
    assert st.tasks.keys() == snap.tasks.keys()
    for k in st.tasks:
        a, b = st.tasks[k], snap.tasks[k]
        assert (a.remaining_work, a.host, a.status, len(a.history)) == (b.remaining_work, b.host, b.status, len(b.history))
    for name in st.rngs:
        assert st.rngs[name].bit_generator.state == snap.rngs[name].bit_generator.state
    assert st.t == snap.t and len(st.host_hist) == len(snap.host_hist)
    assert all(np.array_equal(a, b) for a, b in zip(st.host_hist, snap.host_hist))


def _trajectory(seed, T=30):
    spec = build_config(3)
    st = init_state(spec, SimConfig(), seed)
    rows = []
    for _ in range(T):
        begin_interval(st)
        st, out = step(st, schedule_pending(st))
        rows.append((out.host_features.copy(), [c.task_id for c in out.completions], out.crashed))
    return rows


def test_determinism():
    a, b = _trajectory(11), _trajectory(11)
    for (fa, ca, ka), (fb, cb, kb) in zip(a, b):
        np.testing.assert_array_equal(fa, fb)
        assert ca == cb and ka == kb


def test_run_invariants_and_task_conservation():
    spec = build_config(2)
    cfg = SimConfig(fault_model=FaultModel(rate=20.0))
    st = init_state(spec, cfg, 5)
    arrived, done = set(), set()
    for _ in range(60):
        new = begin_interval(st)
        arrived |= {x.id for x in new}
        st, out = step(st, schedule_pending(st))
        done |= {c.task_id for c in out.completions}
        assert np.all(out.work_done <= np.array([h.cpu_capacity for h in spec.hosts]) + 1e-9)
        assert np.all(out.host_features[:, 0] >= 0) and np.all(out.host_features[:, 0] <= 1 + cfg.overload_cap)
        q = out.qos
        for v in (q.art, q.aec, q.migration_overhead):
            assert 0.0 <= v <= 1.0
        for x in st.tasks.values():
            assert 0.0 <= x.remaining_work <= x.total_work
            assert x.status != "done"
    assert arrived == done | set(st.tasks)
    assert not (done & set(st.tasks))
