"""Task arithmetic on raw task vectors or on fitted bases.

Every merge works the same way whether it receives a TaskVectorMatrix (the
M = T case) or a BasisModel: the vectors being combined are the columns of
the matrix or the basis vectors B_m. Candidate models are scored by an
*evaluator*, any callable mapping a parameter vector to a mean loss (lower is
better), so nothing here knows about datasets.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .bases.model import BasisModel, UnsupportedOperation
from .parallel import ordered_map
from .vecstore import TaskVectorMatrix, save_collection

Evaluator = Callable[[np.ndarray], float]
Source = BasisModel | TaskVectorMatrix

DEFAULT_ALPHA_GRID = tuple(np.linspace(0.0, 1.0, 21))
METHODS = ("ta", "ties", "lns")
ALIGN_TOL = 1e-12


class LossTask(Protocol):
    def loss(self, theta: np.ndarray) -> float: ...

    def grad(self, theta: np.ndarray) -> np.ndarray: ...


def parse_alpha_grid(text: str) -> tuple[float, ...]:
    """``"start:stop:count"`` (inclusive, evenly spaced) or a comma list."""
    if ":" in text:
        try:
            start, stop, count = text.split(":")
            start, stop, n = float(start), float(stop), int(count)
        except ValueError as exc:
            raise ValueError(f"alpha grid must look like START:STOP:COUNT, got {text!r}") from exc
        if n < 1:
            raise ValueError("alpha grid needs at least one point")
        return tuple(float(a) for a in np.linspace(start, stop, n))
    return tuple(float(a) for a in text.split(","))


@dataclass(frozen=True)
class LnsConfig:
    sigmoid_bias: float = 5.0
    l1_strength: float = 1e-4
    lr: float = 10.0
    epochs: int = 200
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.l1_strength < 0:
            raise ValueError("l1_strength must be nonnegative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class MergeSpec:
    method: str = "ta"
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    ties_topk_fraction: float = 0.2
    lns: LnsConfig = field(default_factory=LnsConfig)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        grid = tuple(float(a) for a in self.alpha_grid)
        if not grid:
            raise ValueError("alpha_grid must be nonempty")
        if any(not math.isfinite(a) or a < 0 for a in grid):
            raise ValueError("alpha_grid entries must be finite and >= 0")
        object.__setattr__(self, "alpha_grid", grid)
        if not 0.0 < self.ties_topk_fraction <= 1.0:
            raise ValueError("ties_topk_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha_grid": list(self.alpha_grid),
            "ties_topk_fraction": self.ties_topk_fraction,
            "lns": vars(self.lns).copy(),
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class MergedModel:
    theta: np.ndarray
    provenance: dict[str, Any]
    inputs_used: tuple[str, ...]

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(theta)):
            raise ValueError("merged parameters are not finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "inputs_used", tuple(self.inputs_used))


@dataclass(frozen=True, eq=False)
class MaskSet:
    logits: np.ndarray  # d x M
    threshold: float

    @property
    def masks(self) -> np.ndarray:
        return _sigmoid(self.logits) > self.threshold

    @property
    def sparsity(self) -> np.ndarray:
        """Fraction of ones per mask."""
        return self.masks.mean(axis=0)


# ---- helpers ---------------------------------------------------------------


def _vectors(src: Source) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """(d x K vectors to combine, theta0, their names)."""
    if isinstance(src, BasisModel):
        names = tuple(f"basis{m}" for m in range(src.M))
        return src.B, src.base_point(), names
    return src.columns, src.base_point(), src.names


def _encoder(src: Source) -> np.ndarray:
    if isinstance(src, BasisModel):
        if src.W_e is None:
            raise UnsupportedOperation(f"{src.method.value} bases carry no encoder weights")
        return src.W_e
    return np.eye(src.T)


def _with_alpha(theta0: np.ndarray, direction: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0.0:
        return theta0.copy()
    return theta0 + alpha * direction


def _check_loss(value, alpha) -> float:
    v = float(value)
    if math.isnan(v):
        raise ValueError(f"evaluator returned NaN at alpha={alpha}")
    return v


def grid_search(theta0: np.ndarray, direction: np.ndarray, evaluator: Evaluator,
                grid: Sequence[float]) -> tuple[float, float, list[float]]:
    """Argmin over ``theta0 + alpha * direction``; ties go to the smaller alpha."""
    grid = [float(a) for a in grid]
    losses = ordered_map(lambda a: _check_loss(evaluator(_with_alpha(theta0, direction, a)), a), grid)
    best = min(range(len(grid)), key=lambda i: (losses[i], grid[i]))
    return grid[best], losses[best], losses


# ---- TA ----------------------------------------------------------------------


def merge_ta(src: Source, evaluator: Evaluator, spec: MergeSpec = MergeSpec()) -> MergedModel:
    """theta0 + alpha* * sum of vectors, alpha* the grid argmin of the evaluator."""
    V, theta0, names = _vectors(src)
    direction = V.sum(axis=1)
    alpha, loss, losses = grid_search(theta0, direction, evaluator, spec.alpha_grid)
    prov = {"method": "ta", "alpha": alpha, "loss": loss, "grid_losses": losses,
            "alpha_grid": list(spec.alpha_grid)}
    if isinstance(src, BasisModel) and src.W_e is not None:
        # coefficients on the original task vectors (nonnegative for convex encoders)
        prov["task_coefficients"] = (alpha * src.W_e.sum(axis=1)).tolist()
    return MergedModel(_with_alpha(theta0, direction, alpha), prov, names)


# ---- TIES --------------------------------------------------------------------


def trim_count(d: int, fraction: float) -> int:
    k = int(math.floor(fraction * d + 0.5))
    if k < 1:
        raise ValueError(f"trim fraction too small: {fraction} of {d} coordinates keeps nothing")
    return min(k, d)


def trim(V: np.ndarray, fraction: float) -> np.ndarray:
    """Keep the k largest-magnitude entries of each column; equal magnitudes favour lower indices."""
    V = np.asarray(V, dtype=np.float64)
    k = trim_count(V.shape[0], fraction)
    out = np.zeros_like(V)
    for j in range(V.shape[1]):
        keep = np.argsort(-np.abs(V[:, j]), kind="stable")[:k]
        out[keep, j] = V[keep, j]
    return out


def trim_elect_merge(V: np.ndarray, fraction: float) -> np.ndarray:
    """Per coordinate: trim, elect the sign of the summed trimmed values (+ on ties),
    then sum the kept entries that agree with the elected sign."""
    tr = trim(V, fraction)
    elected = np.where(tr.sum(axis=1) >= 0.0, 1.0, -1.0)
    agree = np.sign(tr) == elected[:, None]
    return np.where(agree, tr, 0.0).sum(axis=1)


def merge_ties(src: Source, evaluator: Evaluator, spec: MergeSpec = MergeSpec()) -> MergedModel:
    V, theta0, names = _vectors(src)
    direction = trim_elect_merge(V, spec.ties_topk_fraction)
    alpha, loss, losses = grid_search(theta0, direction, evaluator, spec.alpha_grid)
    prov = {"method": "ties", "alpha": alpha, "loss": loss, "grid_losses": losses,
            "alpha_grid": list(spec.alpha_grid), "topk_fraction": spec.ties_topk_fraction,
            "kept_per_vector": trim_count(V.shape[0], spec.ties_topk_fraction)}
    return MergedModel(_with_alpha(theta0, direction, alpha), prov, names)


# ---- Localize-and-Stitch -----------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _train_mask(b: np.ndarray, theta0: np.ndarray, tasks: Sequence[LossTask], weights: np.ndarray,
                cfg: LnsConfig) -> np.ndarray:
    S = np.full(b.shape, cfg.sigmoid_bias, dtype=np.float64)
    active = [(w, t) for w, t in zip(weights, tasks) if w > 0]
    for _ in range(cfg.epochs):
        s = _sigmoid(S)
        theta = theta0 + s * b
        g = np.zeros_like(b)
        for w, t in active:
            g += w * np.asarray(t.grad(theta), dtype=np.float64)
        S -= cfg.lr * (b * g + cfg.l1_strength) * s * (1.0 - s)
    return S


def lns_objective(S: np.ndarray, b: np.ndarray, theta0: np.ndarray, tasks: Sequence[LossTask],
                  weights: np.ndarray, l1_strength: float) -> float:
    """Encoder-weighted task losses at theta0 + sigmoid(S) * b plus the l1 mask penalty."""
    s = _sigmoid(S)
    theta = theta0 + s * b
    return float(sum(w * t.loss(theta) for w, t in zip(weights, tasks)) + l1_strength * s.sum())


def stitch(theta0: np.ndarray, V: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Coordinates claimed by several masks get the mean of the claiming vectors."""
    claims = masks.sum(axis=1)
    total = np.where(masks, V, 0.0).sum(axis=1)
    return theta0 + np.where(claims > 0, total / np.maximum(claims, 1), 0.0)


def merge_lns(src: Source, tasks: Sequence[LossTask], spec: MergeSpec = MergeSpec()) -> tuple[MergedModel, MaskSet]:
    """Learn one mask per vector against the encoder-weighted task losses, then stitch."""
    V, theta0, names = _vectors(src)
    W = _encoder(src)
    if W.shape[0] != len(tasks):
        raise ValueError(f"{len(tasks)} tasks supplied for an encoder over {W.shape[0]} sources")
    cfg = spec.lns
    cols = ordered_map(lambda m: _train_mask(V[:, m], theta0, tasks, W[:, m], cfg), range(V.shape[1]))
    maskset = MaskSet(np.column_stack(cols), cfg.binarize_threshold)
    masks = maskset.masks
    empty = [m for m in range(masks.shape[1]) if not masks[:, m].any()]
    if empty:
        warnings.warn(f"masks {empty} are all zero; those vectors contribute nothing", UserWarning, stacklevel=2)
    prov = {"method": "lns", "sparsity": maskset.sparsity.tolist(), "empty_masks": empty,
            "lns": vars(cfg).copy()}
    return MergedModel(stitch(theta0, V, masks), prov, names), maskset


def merge(src: Source, spec: MergeSpec, evaluator: Evaluator | None = None,
          tasks: Sequence[LossTask] | None = None) -> MergedModel:
    """Dispatch on ``spec.method``."""
    if spec.method == "lns":
        if tasks is None:
            raise ValueError("Localize-and-Stitch needs task losses")
        return merge_lns(src, tasks, spec)[0]
    if evaluator is None:
        raise ValueError(f"{spec.method} merging needs an evaluator")
    return (merge_ta if spec.method == "ta" else merge_ties)(src, evaluator, spec)


# ---- reconstruction and negation ---------------------------------------------


def reconstruct(src: Source) -> TaskVectorMatrix:
    """T_hat = mu 1^T + B W_d (the identity for a raw matrix)."""
    if isinstance(src, TaskVectorMatrix):
        return src
    if src.W_d is None:
        raise UnsupportedOperation(f"{src.method.value} model has no decoder; cannot reconstruct")
    T_hat = src.B @ src.W_d
    if src.mu is not None:
        T_hat = T_hat + src.mu[:, None]
    return TaskVectorMatrix(T_hat, src.source_names, src.theta0)


def score(loss: float) -> float:
    """Map a loss onto (0, 1]; higher is better."""
    return math.exp(-loss)


def negate(src: Source, j: int, evaluator_target: Evaluator, evaluator_control: Evaluator,
           alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID, control_floor: float = 0.95) -> MergedModel:
    """theta0 - alpha* tau_hat_j with alpha* the most-forgetting grid point that keeps the
    control score at least ``control_floor`` times its value at theta0."""
    rec = reconstruct(src)
    if not 0 <= j < rec.T:
        raise IndexError(f"task index {j} out of range [0, {rec.T})")
    if not 0.0 <= control_floor <= 1.0:
        raise ValueError("control_floor must lie in [0, 1]")
    theta0 = rec.base_point()
    tau = rec.column(j)
    ctrl0 = float(evaluator_control(theta0))
    tgt0 = float(evaluator_target(theta0))
    # control score >= floor * control score at theta0, in loss space
    slack = math.inf if control_floor == 0.0 else -math.log(control_floor)

    grid = [float(a) for a in alpha_grid]

    def evaluate(a):
        theta = _with_alpha(theta0, -tau, a)
        return float(evaluator_target(theta)), float(evaluator_control(theta))

    results = ordered_map(evaluate, grid)
    feasible = [i for i, (_, c) in enumerate(results) if c - ctrl0 <= slack]
    if feasible:
        best = max(feasible, key=lambda i: (results[i][0], -grid[i]))
        alpha, (tgt, ctrl) = grid[best], results[best]
    else:
        alpha, tgt, ctrl = 0.0, tgt0, ctrl0
    prov = {
        "method": "negate",
        "task": j,
        "task_name": rec.names[j],
        "alpha": alpha,
        "feasible": bool(feasible),
        "control_floor": control_floor,
        "target_loss": tgt,
        "target_loss_theta0": tgt0,
        "control_loss": ctrl,
        "control_loss_theta0": ctrl0,
        "target_score": score(tgt),
        "control_score": score(ctrl),
        "control_score_theta0": score(ctrl0),
        "source": src.method.value if isinstance(src, BasisModel) else "raw",
    }
    return MergedModel(_with_alpha(theta0, -tau, alpha), prov, (rec.names[j],))


# ---- out-of-distribution merge -----------------------------------------------


def ood_merge(src: Source, target: np.ndarray, mode: str = "best_aligned",
              evaluator: Evaluator | None = None, alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
              sources: TaskVectorMatrix | None = None) -> MergedModel:
    """Add the single vector most aligned with ``target`` to theta0.

    Alignment diagnostics are computed against the original task vectors
    (``sources``, or the reconstruction when only a basis is available):
    gamma = <target, tau_i*> / C with C the largest squared norm among the
    sources and the target, and for bases rho = max_m W_e[i*, m].
    """
    if mode not in ("best_aligned", "grid"):
        raise ValueError(f"unknown mode {mode!r}")
    V, theta0, names = _vectors(src)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if target.shape != (V.shape[0],):
        raise ValueError(f"target has length {target.size}, expected {V.shape[0]}")
    align = V.T @ target
    sel = int(np.argmax(align))
    raw = sources if sources is not None else reconstruct(src)
    raw_align = raw.columns.T @ target
    i_star = int(np.argmax(raw_align))
    C = max(float(np.max(np.sum(raw.columns ** 2, axis=0))), float(target @ target))
    # exact zeros come out as +-1e-17, so "positive" means above a C-relative floor
    floor = ALIGN_TOL * C
    if align.max() <= floor or raw_align.max() <= floor:
        warnings.warn("no positively aligned source", UserWarning, stacklevel=2)
    prov: dict[str, Any] = {
        "method": "ood",
        "mode": mode,
        "selected": sel,
        "selected_name": names[sel],
        "alignments": align.tolist(),
        "i_star": i_star,
        "C": C,
        "gamma_hat": float(raw_align[i_star] / C) if C > 0 else 0.0,
        "all_sources_nonnegative": bool(np.all(raw_align >= -floor)),
    }
    if isinstance(src, BasisModel) and src.W_e is not None:
        prov["rho_hat"] = float(np.max(src.W_e[i_star]))
    direction = V[:, sel]
    alpha = 1.0
    if mode == "grid":
        if evaluator is None:
            raise ValueError("grid mode needs an evaluator")
        alpha, loss, losses = grid_search(theta0, direction, evaluator, alpha_grid)
        prov.update(loss=loss, grid_losses=losses, alpha_grid=[float(a) for a in alpha_grid])
    prov["alpha"] = alpha
    return MergedModel(_with_alpha(theta0, direction, alpha), prov, (names[sel],))


# ---- validation subsampling --------------------------------------------------


@dataclass(frozen=True)
class SubsamplePlan:
    counts: tuple[int, ...]
    indices: tuple[tuple[int, ...], ...]


def subsample_plan(n_per_task: Sequence[int], M: int, T: int, seed: int = 0) -> SubsamplePlan:
    """Draw round-half-up(n_i M / T) validation indices per task, at least one when n_i >= 1."""
    if not 1 <= M <= T:
        raise ValueError(f"M={M} out of range [1, {T}]")
    rng = np.random.default_rng(seed)
    counts, indices = [], []
    for n in n_per_task:
        n = int(n)
        if n < 0:
            raise ValueError("sample counts must be nonnegative")
        c = 0 if n == 0 else min(n, max(1, int(math.floor(n * M / T + 0.5))))
        counts.append(c)
        idx = np.sort(rng.choice(n, size=c, replace=False)) if c else np.zeros(0, dtype=int)
        indices.append(tuple(int(i) for i in idx))
    return SubsamplePlan(tuple(counts), tuple(indices))


# ---- export --------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def save_merged(model: MergedModel, path: str | Path) -> Path:
    """Write theta as a one-column TVB1 file plus ``<path>.json`` provenance."""
    path = Path(path)
    save_collection(TaskVectorMatrix(model.theta[:, None], ("merged",)), path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(dumps({"provenance": model.provenance, "inputs_used": list(model.inputs_used)}))
    return sidecar


def save_masks(maskset: MaskSet, path: str | Path) -> Path:
    """Bit-packed masks (one little-endian bit row per mask) plus ``<path>.json`` report."""
    path = Path(path)
    masks = maskset.masks
    packed = [np.packbits(masks[:, m], bitorder="little") for m in range(masks.shape[1])]
    path.write_bytes(b"".join(p.tobytes() for p in packed))
    report = {"d": int(masks.shape[0]), "count": int(masks.shape[1]),
              "bytes_per_mask": int(packed[0].size) if packed else 0,
              "bitorder": "little", "threshold": maskset.threshold,
              "sparsity": maskset.sparsity.tolist()}
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(dumps(report))
    return sidecar


def load_masks(path: str | Path) -> np.ndarray:
    path = Path(path)
    report = json.loads(path.with_name(path.name + ".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    d, count, nb = report["d"], report["count"], report["bytes_per_mask"]
    if raw.size != count * nb:
        raise ValueError(f"mask file holds {raw.size} bytes, expected {count * nb}")
    rows = [np.unpackbits(raw[m * nb:(m + 1) * nb], count=d, bitorder="little") for m in range(count)]
    return np.column_stack(rows).astype(bool) if rows else np.zeros((d, 0), dtype=bool)
