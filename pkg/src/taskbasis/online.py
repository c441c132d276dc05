"""Fixed-budget online basis addition.

Task vectors arrive one at a time. The buffer holds at most M vectors; when a
new vector arrives at a full buffer, the M stored vectors are compacted into
M - 1 convex bases and the newcomer is appended. After every step the buffer
is merged into the current model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .arithmetic import Evaluator, LossTask, MergedModel, MergeSpec, dumps, merge, score
from .bases.autoencoder import AeConfig, DivergenceError, fit_ae
from .vecstore import TaskVectorMatrix

log = logging.getLogger(__name__)

COMPACTIONS = ("ae", "rand_select")
ONLINE_MERGE = MergeSpec(method="ta", alpha_grid=(0.3,))
ONLINE_AE = AeConfig(steps=1000)


def _frozen(v: np.ndarray) -> np.ndarray:
    v = np.array(v, dtype=np.float64, copy=True).reshape(-1)
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class BufferState:
    M: int
    theta0: np.ndarray
    stored: tuple[np.ndarray, ...] = ()
    kinds: tuple[str, ...] = ()
    t: int = 0
    compaction_count: int = 0
    drift: float = 0.0
    merge_spec: MergeSpec = ONLINE_MERGE
    compaction: str = "ae"
    ae_config: AeConfig = ONLINE_AE
    seed: int = 0
    history: tuple[dict, ...] = ()

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("budget M must be >= 1")
        if self.compaction not in COMPACTIONS:
            raise ValueError(f"compaction must be one of {COMPACTIONS}")
        object.__setattr__(self, "theta0", _frozen(self.theta0))
        if len(self.stored) > self.M:
            raise AssertionError(f"buffer holds {len(self.stored)} > M={self.M} vectors")
        if len(self.kinds) != len(self.stored):
            raise ValueError("kinds must label every stored vector")

    @property
    def d(self) -> int:
        return self.theta0.size

    def matrix(self) -> TaskVectorMatrix | None:
        if not self.stored:
            return None
        names = tuple(f"{k}{i}" for i, k in enumerate(self.kinds))
        return TaskVectorMatrix(np.column_stack(self.stored), names, self.theta0)


def _null_evaluator(theta: np.ndarray) -> float:
    return 0.0


def _compact(state: BufferState) -> tuple[tuple[np.ndarray, ...], tuple[str, ...], dict]:
    """Map the M stored vectors to M - 1."""
    M = state.M
    event: dict[str, Any] = {"compaction": state.compaction}
    if M == 1:
        event["loss"] = float(np.sum(state.stored[0] ** 2))
        return (), (), event
    rng = np.random.default_rng([state.seed, state.t])
    if state.compaction == "ae":
        buf = state.matrix()
        try:
            model = fit_ae(buf, replace(state.ae_config, M=M - 1, seed=state.seed))
        except DivergenceError as exc:
            log.warning("compaction at step %d diverged (%s); dropping a random vector", state.t + 1, exc)
            event.update(fallback="rand_select", error=str(exc))
        else:
            event["loss"] = model.loss
            kept = tuple(_frozen(model.B[:, m]) for m in range(M - 1))
            return kept, ("basis",) * (M - 1), event
    drop = int(rng.integers(M))
    keep = [i for i in range(M) if i != drop]
    event.update(dropped=drop, loss=float(np.sum(state.stored[drop] ** 2)))
    return tuple(state.stored[i] for i in keep), tuple(state.kinds[i] for i in keep), event


def online_step(state: BufferState, tau: np.ndarray, evaluator: Evaluator | None = None,
                tasks: Sequence[LossTask] | None = None) -> tuple[BufferState, MergedModel]:
    tau = _frozen(tau)
    if tau.size != state.d:
        raise ValueError(f"task vector has length {tau.size}, expected {state.d}")
    stored, kinds = state.stored, state.kinds
    record: dict[str, Any] = {"step": state.t + 1, "compacted": False, "compaction_seconds": 0.0}
    count, drift = state.compaction_count, state.drift
    if len(stored) >= state.M:
        start = time.perf_counter()
        stored, kinds, event = _compact(state)
        record["compaction_seconds"] = time.perf_counter() - start
        assert len(stored) == state.M - 1
        count += 1
        drift += event["loss"]
        record.update(compacted=True, compaction_event=event)
    stored = stored + (tau,)
    kinds = kinds + ("raw",)

    start = time.perf_counter()
    buf = TaskVectorMatrix(np.column_stack(stored), tuple(f"{k}{i}" for i, k in enumerate(kinds)), state.theta0)
    spec = state.merge_spec
    if evaluator is None and spec.method != "lns":
        if len(spec.alpha_grid) != 1:
            raise ValueError("an evaluator is required unless the merge coefficient is fixed")
        evaluator = _null_evaluator
    merged = merge(buf, spec, evaluator=evaluator, tasks=tasks)
    record["merge_seconds"] = time.perf_counter() - start
    record.update(buffer_size=len(stored), buffer_kinds=list(kinds), drift=drift)

    new = replace(state, stored=stored, kinds=kinds, t=state.t + 1, compaction_count=count, drift=drift,
                  history=state.history + (record,))
    return new, merged


@dataclass
class StreamReport:
    steps: list[dict] = field(default_factory=list)
    thetas: list[np.ndarray] = field(default_factory=list)
    compaction_count: int = 0
    fallbacks: int = 0
    max_buffer: int = 0

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]

    def final_scores(self) -> list[float]:
        return self.steps[-1]["scores"]

    def summary(self, include_timing: bool = False) -> dict:
        out = {
            "steps": len(self.steps),
            "compaction_count": self.compaction_count,
            "fallbacks": self.fallbacks,
            "max_buffer": self.max_buffer,
            "final_mean_score": float(np.mean(self.final_scores())) if self.steps and self.final_scores() else None,
            "drift": self.steps[-1]["drift"] if self.steps else 0.0,
        }
        if include_timing:
            out["compaction_seconds"] = sum(s["compaction_seconds"] for s in self.steps)
            out["merge_seconds"] = sum(s["merge_seconds"] for s in self.steps)
        return out

    def deterministic_view(self) -> dict:
        """Everything except wall-clock timings, for replay comparisons."""
        steps = [{k: v for k, v in s.items() if not k.endswith("_seconds")} for s in self.steps]
        return {"steps": steps, "thetas": [t.tobytes() for t in self.thetas], "summary": self.summary()}

    def csv_rows(self) -> list[tuple[int, int, float]]:
        return [(s["step"], i, v) for s in self.steps for i, v in zip(s["seen"], s["scores"])]

    def summary_json(self) -> str:
        return dumps(self.summary())


def run_stream(stream: TaskVectorMatrix | Sequence[np.ndarray], M: int, merge_spec: MergeSpec = ONLINE_MERGE,
               compaction: str = "ae", task_losses: Sequence[Callable[[np.ndarray], float]] | None = None,
               theta0: np.ndarray | None = None, ae_config: AeConfig = ONLINE_AE, seed: int = 0) -> StreamReport:
    """Feed the stream through :func:`online_step` and score every step.

    ``task_losses[i]`` is the loss of the task behind stream element i; at step
    t the merged model is scored on the tasks seen so far and, for grid merges,
    their mean loss is the selection objective. Localize-and-Stitch needs task
    losses aligned with the buffer columns, which compacted bases do not have,
    so only TA and TIES are supported here.
    """
    if isinstance(stream, TaskVectorMatrix):
        vectors = [stream.column(i) for i in range(stream.T)]
        theta0 = stream.base_point() if theta0 is None else theta0
    else:
        vectors = [np.asarray(v, dtype=np.float64) for v in stream]
    if not vectors:
        raise ValueError("empty stream")
    if merge_spec.method == "lns":
        raise ValueError("online merging supports ta and ties")
    theta0 = np.zeros(vectors[0].size) if theta0 is None else theta0
    if task_losses is not None and len(task_losses) != len(vectors):
        raise ValueError("task_losses must align with the stream")
    state = BufferState(M, theta0, merge_spec=merge_spec, compaction=compaction, ae_config=ae_config, seed=seed)
    report = StreamReport()
    for t, tau in enumerate(vectors):
        seen = list(range(t + 1))
        evaluator = None
        if task_losses is not None:
            losses = task_losses

            def evaluator(theta, seen=seen):
                return float(np.mean([losses[i](theta) for i in seen]))
        state, merged = online_step(state, tau, evaluator)
        assert len(state.stored) <= M
        rec = dict(state.history[-1])
        rec["seen"] = seen
        rec["scores"] = [score(task_losses[i](merged.theta)) for i in seen] if task_losses is not None else []
        rec["alpha"] = merged.provenance.get("alpha")
        if rec.get("compaction_event", {}).get("fallback"):
            report.fallbacks += 1
        report.steps.append(rec)
        report.thetas.append(merged.theta)
        report.max_buffer = max(report.max_buffer, rec["buffer_size"])
    report.compaction_count = state.compaction_count
    return report
