import csv
import io

import numpy as np
import pytest

from taskbasis.arithmetic import MergeSpec, merge_ta
from taskbasis.bases import AeConfig
from taskbasis.online import BufferState, online_step, run_stream
from taskbasis.testbed import generate_suite
from taskbasis.vecstore import TaskVectorMatrix


@pytest.fixture(scope="module")
def suite():
    return generate_suite("clustered:4:0.9:0.0", d=128, T=8, seed=2)


def losses(suite):
    return [t.loss for t in suite.tasks]


def test_buffer_state_validation():
    with pytest.raises(ValueError):
        BufferState(0, np.zeros(3))
    with pytest.raises(ValueError):
        BufferState(2, np.zeros(3), compaction="pca")
    with pytest.raises(AssertionError):
        BufferState(1, np.zeros(2), stored=(np.zeros(2), np.zeros(2)), kinds=("raw", "raw"))
    s = BufferState(2, np.zeros(3))
    with pytest.raises(ValueError):
        online_step(s, np.zeros(4))


def test_prefix_matches_offline_bitwise(suite):
    m = suite.matrix()
    report = run_stream(m, 4, task_losses=losses(suite))
    spec = MergeSpec("ta", alpha_grid=(0.3,))
    for t in range(4):
        prefix = TaskVectorMatrix(m.columns[:, : t + 1], theta0=m.theta0)
        offline = merge_ta(prefix, lambda th: 0.0, spec)
        assert report.thetas[t].tobytes() == offline.theta.tobytes()


def test_full_budget_never_compacts(suite):
    m = suite.matrix()
    report = run_stream(m, 8)
    offline = merge_ta(m, lambda th: 0.0, MergeSpec("ta", alpha_grid=(0.3,)))
    assert report.compaction_count == 0
    assert report.final_theta.tobytes() == offline.theta.tobytes()


def test_budget_one_holds_one_vector(suite):
    m = suite.matrix()
    state = BufferState(1, m.theta0)
    for i in range(m.T):
        state, _ = online_step(state, m.column(i))
        assert len(state.stored) == 1 and state.t == i + 1


def test_compaction_count_and_replay(suite):
    m = suite.matrix()
    cfg = AeConfig(steps=300)
    a = run_stream(m, 4, task_losses=losses(suite), ae_config=cfg, seed=5)
    b = run_stream(m, 4, task_losses=losses(suite), ae_config=cfg, seed=5)
    assert a.compaction_count == 4 and a.max_buffer == 4
    assert all(s["buffer_size"] == min(s["step"], 4) for s in a.steps)
    assert a.deterministic_view() == b.deterministic_view()
    widths = [s for s in a.steps if s["compacted"]]
    assert all(s["buffer_kinds"].count("basis") == 3 for s in widths)


def test_identical_stream_is_constant():
    rng = np.random.default_rng(0)
    tau, theta0 = rng.standard_normal(16), rng.standard_normal(16)
    # budget 1 keeps only the newest vector, so the sum is a mean of one
    report = run_stream([tau] * 6, 1, MergeSpec("ta", alpha_grid=(1.0,)), theta0=theta0)
    first = report.thetas[0]
    assert all(np.array_equal(t, first) for t in report.thetas)


def test_rand_select_compaction_and_grid_merge(suite):
    m = suite.matrix()
    report = run_stream(m, 3, MergeSpec("ta", alpha_grid=(0.0, 0.3, 0.6)), compaction="rand_select",
                        task_losses=losses(suite))
    assert report.compaction_count == 5 and report.fallbacks == 0
    assert all(s["compaction_event"]["compaction"] == "rand_select" for s in report.steps if s["compacted"])
    with pytest.raises(ValueError, match="evaluator"):
        run_stream(m, 3, MergeSpec("ta", alpha_grid=(0.0, 0.3)))


def test_divergence_falls_back(suite):
    m = suite.matrix()
    report = run_stream(m, 3, ae_config=AeConfig(steps=50, lr=1e6))
    assert report.fallbacks >= 1
    assert max(s["buffer_size"] for s in report.steps) <= 3


def test_lns_rejected_and_empty_stream(suite):
    with pytest.raises(ValueError):
        run_stream(suite.matrix(), 3, MergeSpec("lns"))
    with pytest.raises(ValueError):
        run_stream([], 3)


def test_report_outputs(suite):
    report = run_stream(suite.matrix(), 4, task_losses=losses(suite), ae_config=AeConfig(steps=100))
    rows = report.csv_rows()
    assert len(rows) == sum(range(1, 9))
    assert all(0 < r[2] <= 1 for r in rows)
    s = report.summary(include_timing=True)
    assert s["compaction_seconds"] >= 0 and "merge_seconds" in s
    assert "compaction_seconds" not in report.summary()
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    assert buf.getvalue().count("\n") == len(rows)
    assert report.summary_json().endswith("\n")
