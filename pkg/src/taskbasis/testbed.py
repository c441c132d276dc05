"""Synthetic quadratic task suites on which every loss, constant and bound is exact.

Each task has loss ``L(theta) = 1/2 (theta - theta_i)^T H (theta - theta_i)`` with
``H = diag(D) + U U^T``, so it is minimised (with zero gradient) at its own
fine-tuned point and its smoothness constant is ``||H||_2``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .arithmetic import dumps, ood_merge, reconstruct, score
from .bases.model import BasisModel, Method
from .linalg import power_iteration, random_orthonormal
from .vecstore import TaskVectorMatrix, gram, load_collection, save_collection, spectral_bounds

BOUND_TOL = 1e-9
SIMPLEX_TOL = 1e-9
ALIGN_TOL = 1e-12  # relative to C; exact zeros come out as +-1e-17
HESSIAN_NORM_RANGE = (0.5, 2.0)
PROFILES = ("orthogonal", "clustered", "planted_target")


@dataclass(frozen=True, eq=False)
class QuadraticTask:
    minimizer: np.ndarray
    diag: np.ndarray
    lowrank: np.ndarray | None = None  # d x r
    name: str = "task"

    def __post_init__(self):
        for attr in ("minimizer", "diag"):
            a = np.array(getattr(self, attr), dtype=np.float64, copy=True).reshape(-1)
            a.flags.writeable = False
            object.__setattr__(self, attr, a)
        if self.diag.shape != self.minimizer.shape:
            raise ValueError("Hessian diagonal and minimizer differ in length")
        if np.any(self.diag < 0):
            raise ValueError("Hessian diagonal must be nonnegative")
        if self.lowrank is not None:
            U = np.array(self.lowrank, dtype=np.float64, copy=True)
            if U.ndim == 1:
                U = U[:, None]
            if U.shape[0] != self.d:
                raise ValueError("low-rank factor has the wrong number of rows")
            U.flags.writeable = False
            object.__setattr__(self, "lowrank", U)

    @property
    def d(self) -> int:
        return self.minimizer.size

    @property
    def rank(self) -> int:
        return 0 if self.lowrank is None else self.lowrank.shape[1]

    def hess_apply(self, v: np.ndarray) -> np.ndarray:
        out = self.diag * v
        if self.lowrank is not None:
            out = out + self.lowrank @ (self.lowrank.T @ v)
        return out

    def dense_hessian(self) -> np.ndarray:
        H = np.diag(self.diag)
        if self.lowrank is not None:
            H = H + self.lowrank @ self.lowrank.T
        return H

    def loss(self, theta: np.ndarray) -> float:
        delta = np.asarray(theta, dtype=np.float64) - self.minimizer
        return 0.5 * float(delta @ self.hess_apply(delta))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.hess_apply(np.asarray(theta, dtype=np.float64) - self.minimizer)

    def smoothness(self, tol: float = 1e-12, seed: int = 0) -> float:
        """||H||_2 estimated by power iteration on the Hessian action."""
        return power_iteration(self.hess_apply, self.d, tol=tol, max_iters=100_000, seed=seed).value


@dataclass(frozen=True, eq=False)
class QuadraticTaskSuite:
    theta0: np.ndarray
    tasks: tuple[QuadraticTask, ...]
    target: QuadraticTask | None = None
    control: QuadraticTask | None = None
    profile: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        t0 = np.array(self.theta0, dtype=np.float64, copy=True).reshape(-1)
        t0.flags.writeable = False
        object.__setattr__(self, "theta0", t0)
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("a suite needs at least one task")
        for t in self.all_tasks():
            if t.d != t0.size:
                raise ValueError(f"task {t.name} has dimension {t.d}, expected {t0.size}")
        self.matrix()  # validates names / finiteness

    @property
    def d(self) -> int:
        return self.theta0.size

    @property
    def T(self) -> int:
        return len(self.tasks)

    def all_tasks(self) -> list[QuadraticTask]:
        extra = [t for t in (self.target, self.control) if t is not None]
        return list(self.tasks) + extra

    def matrix(self) -> TaskVectorMatrix:
        cols = np.column_stack([t.minimizer - self.theta0 for t in self.tasks])
        return TaskVectorMatrix(cols, tuple(t.name for t in self.tasks), self.theta0,
                                {"profile": self.profile})

    def target_vector(self) -> np.ndarray:
        if self.target is None:
            raise ValueError("suite has no target task")
        return self.target.minimizer - self.theta0

    def losses(self, theta: np.ndarray, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(self.T) if indices is None else indices
        return np.array([self.tasks[i].loss(theta) for i in idx])

    def evaluator(self, indices: Sequence[int] | None = None):
        """Mean loss over the selected tasks (all by default)."""
        idx = tuple(range(self.T)) if indices is None else tuple(indices)
        return lambda theta: float(np.mean(self.losses(theta, idx)))

    def task_evaluator(self, i: int):
        return self.tasks[i].loss

    def control_evaluator(self):
        if self.control is None:
            raise ValueError("suite has no control task")
        return self.control.loss

    def mean_score(self, theta: np.ndarray, indices: Sequence[int] | None = None) -> float:
        return float(np.mean([score(v) for v in self.losses(theta, indices)]))


# ---- generation ----------------------------------------------------------------


@dataclass(frozen=True)
class Profile:
    kind: str = "orthogonal"
    k: int = 2
    cos_in: float = 0.9
    cos_out: float = 0.0
    gamma: float = 0.8

    def __post_init__(self):
        if self.kind not in PROFILES:
            raise ValueError(f"unknown profile {self.kind!r}; expected one of {PROFILES}")
        if self.kind == "planted_target" and not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "Profile":
        """``orthogonal`` | ``clustered[:k[:cos_in[:cos_out]]]`` | ``planted_target[:gamma]``."""
        parts = text.split(":")
        kind, args = parts[0], parts[1:]
        try:
            if kind == "clustered":
                vals = [int(args[0])] if args else []
                vals += [float(a) for a in args[1:3]]
                return cls(kind, *vals)
            if kind == "planted_target":
                return cls(kind, gamma=float(args[0])) if args else cls(kind)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"cannot parse profile {text!r}") from exc
        if args:
            raise ValueError(f"profile {kind!r} takes no parameters")
        return cls(kind)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.kind == "clustered":
            out.update(k=self.k, cos_in=self.cos_in, cos_out=self.cos_out)
        if self.kind == "planted_target":
            out["gamma"] = self.gamma
        return out


def cluster_labels(T: int, k: int) -> np.ndarray:
    """Contiguous, nearly equal cluster blocks."""
    if not 1 <= k <= T:
        raise ValueError(f"cannot split {T} tasks into {k} clusters")
    return np.concatenate([np.full(len(b), c) for c, b in enumerate(np.array_split(np.arange(T), k))])


def cosine_gram(labels: np.ndarray, cos_in: float, cos_out: float) -> np.ndarray:
    same = labels[:, None] == labels[None, :]
    K = np.where(same, cos_in, cos_out)
    np.fill_diagonal(K, 1.0)
    return K


def _psd_sqrt(K: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(K)
    if w.min() < -1e-12 * max(1.0, w.max()):
        raise ValueError(f"infeasible cosine structure: Gram has eigenvalue {w.min():.3e} < 0")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def random_hessian(d: int, rng: np.random.Generator, rank: int = 2,
                   norm: float | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Diagonal-plus-low-rank PSD Hessian scaled so its spectral norm is ``norm``
    (drawn uniformly from the allowed range when not given)."""
    D = rng.uniform(0.05, 0.3, size=d)
    U = None
    if rank > 0:
        U = random_orthonormal(d, rank, int(rng.integers(2**31))) * np.sqrt(np.linspace(1.0, 0.6, rank))
    target = rng.uniform(*HESSIAN_NORM_RANGE) if norm is None else float(norm)

    def apply(v):
        out = D * v
        return out + U @ (U.T @ v) if U is not None else out

    top = power_iteration(apply, d, tol=1e-14, max_iters=100_000, seed=int(rng.integers(2**31))).value
    s = target / top
    return D * s, (U * math.sqrt(s) if U is not None else None), target


def generate_suite(profile: Profile | str = "orthogonal", d: int = 256, T: int = 8,
                   norm_range: tuple[float, float] = (0.5, 1.0), seed: int = 0,
                   target_gamma: float | None = None, hessian_rank: int = 2) -> QuadraticTaskSuite:
    """Draw a suite whose task vectors realise the profile's cosine structure exactly.

    A control task (minimised at theta0) is always attached. A target task is
    attached for ``planted_target`` or whenever ``target_gamma`` is given:
    ``tau_tar = gamma tau_i* + sqrt(1 - gamma^2) ||tau_i*|| e`` with ``i*`` the
    largest-norm source and ``e`` orthogonal to every source.
    """
    prof = Profile.parse(profile) if isinstance(profile, str) else profile
    if prof.kind == "planted_target" and target_gamma is None:
        target_gamma = prof.gamma
    if T < 1:
        raise ValueError("T must be >= 1")
    lo, hi = norm_range
    if not 0 < lo <= hi:
        raise ValueError("norm_range must satisfy 0 < low <= high")
    need = T + (1 if target_gamma is not None else 0)
    if d < need:
        raise ValueError(f"d={d} too small for {T} tasks" + (" plus a target" if need > T else ""))

    K = np.eye(T)
    labels = None
    if prof.kind == "clustered":
        labels = cluster_labels(T, prof.k)
        K = cosine_gram(labels, prof.cos_in, prof.cos_out)
    root = _psd_sqrt(K)  # fails before any sampling when K is not PSD

    ss = np.random.SeedSequence(seed)
    r_theta, r_norm, r_frame, r_hess = (np.random.default_rng(s) for s in ss.spawn(4))
    theta0 = r_theta.standard_normal(d)
    norms = r_norm.uniform(lo, hi, size=T)
    Q = random_orthonormal(d, need, int(r_frame.integers(2**31)))
    units = Q[:, :T] @ root
    taus = units * norms

    names = [f"task{i}" for i in range(T)]
    tasks = []
    for i in range(T):
        D, U, _ = random_hessian(d, r_hess, hessian_rank)
        tasks.append(QuadraticTask(theta0 + taus[:, i], D, U, names[i]))
    D, U, _ = random_hessian(d, r_hess, hessian_rank)
    control = QuadraticTask(theta0.copy(), D, U, "control")

    target = None
    meta = prof.to_dict()
    meta.update(d=d, T=T, norm_range=[lo, hi], seed=seed, hessian_rank=hessian_rank)
    if labels is not None:
        meta["clusters"] = labels.tolist()
    if target_gamma is not None:
        g = float(target_gamma)
        if not 0.0 < g <= 1.0:
            raise ValueError("target gamma must lie in (0, 1]")
        i_star = int(np.argmax(norms))
        tau_tar = g * taus[:, i_star] + math.sqrt(1.0 - g * g) * norms[i_star] * Q[:, T]
        D, U, _ = random_hessian(d, r_hess, hessian_rank)
        target = QuadraticTask(theta0 + tau_tar, D, U, "target")
        meta.update(target_gamma=g, target_source=i_star)
    return QuadraticTaskSuite(theta0, tuple(tasks), target, control, meta)


def collection_with_spectrum(top: np.ndarray, eigenvalues: Sequence[float], d: int = 64,
                             seed: int = 0) -> TaskVectorMatrix:
    """A d x T collection whose Gram matrix has the given eigenvalues, with the
    leading eigenvectors spanning the columns of ``top`` (T x m)."""
    top = np.asarray(top, dtype=np.float64)
    if top.ndim == 1:
        top = top[:, None]
    lam = np.asarray(eigenvalues, dtype=np.float64)
    T, m = top.shape
    if lam.size != T:
        raise ValueError(f"{lam.size} eigenvalues for T={T}")
    if np.any(np.diff(lam) > 0) or lam.min() < 0:
        raise ValueError("eigenvalues must be nonnegative and nonincreasing")
    rng = np.random.default_rng(seed)
    filler = rng.standard_normal((T, T - m))
    V, _ = np.linalg.qr(np.column_stack([top, filler]))
    U = random_orthonormal(d, T, seed + 1)
    return TaskVectorMatrix(U @ (np.sqrt(lam)[:, None] * V.T))


# ---- constants -----------------------------------------------------------------


@dataclass(frozen=True)
class TheoryConstants:
    C: float
    epsilon: float
    L: tuple[float, ...]
    gamma: float | None = None
    rho: float | None = None
    i_star: int | None = None
    L_target: float | None = None
    L_control: float | None = None

    def to_dict(self) -> dict:
        return {"C": self.C, "epsilon": self.epsilon, "L": list(self.L), "gamma": self.gamma,
                "rho": self.rho, "i_star": self.i_star, "L_target": self.L_target,
                "L_control": self.L_control}


def max_abs_cosine(V: np.ndarray) -> float:
    n = np.linalg.norm(V, axis=0)
    if V.shape[1] < 2:
        return 0.0
    if np.any(n == 0):
        raise ValueError("cosine undefined for a zero task vector")
    Kc = (V.T @ V) / np.outer(n, n)
    np.fill_diagonal(Kc, 0.0)
    return float(min(1.0, np.max(np.abs(Kc))))


def measure_constants(suite: QuadraticTaskSuite, target: QuadraticTask | np.ndarray | None = None,
                      basis: BasisModel | None = None, power_tol: float = 1e-12) -> TheoryConstants:
    """C, epsilon and per-task L; gamma (and rho for a basis) when a target is given.

    When a target is present C also covers its squared norm, since the
    alignment bound compares the target against sources of norm at most sqrt(C).
    """
    V = suite.matrix().columns
    C = float(np.max(np.sum(V * V, axis=0)))
    eps = max_abs_cosine(V)
    L = tuple(t.smoothness(power_tol, seed=i) for i, t in enumerate(suite.tasks))
    L_ctrl = suite.control.smoothness(power_tol) if suite.control is not None else None
    gamma = rho = i_star = L_tar = None
    if target is not None:
        if isinstance(target, QuadraticTask):
            tau_tar = target.minimizer - suite.theta0
            L_tar = target.smoothness(power_tol)
        else:
            tau_tar = np.asarray(target, dtype=np.float64)
        C = max(C, float(tau_tar @ tau_tar))
        align = V.T @ tau_tar
        i_star = int(np.argmax(align))
        gamma = float(align[i_star] / C) if C > 0 else 0.0
        if basis is not None and basis.W_e is not None:
            rho = float(np.max(basis.W_e[i_star]))
    return TheoryConstants(C, eps, L, gamma, rho, i_star, L_tar, L_ctrl)


# ---- bound verification --------------------------------------------------------


@dataclass
class BoundReport:
    kind: str
    applicable: bool
    passed: bool | None
    records: list[dict]
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "applicable": self.applicable, "passed": self.passed,
                "details": self.details, "records": self.records}

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.records:
            keys = sorted({k for r in self.records for k in r})
            w = csv.DictWriter(buf, fieldnames=["kind"] + keys, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({"kind": self.kind, **r})
        return buf.getvalue()


def _require_convex(basis: BasisModel, sources: TaskVectorMatrix) -> None:
    if basis.method not in (Method.AE, Method.RAND_SELECT) or basis.W_e is None:
        raise ValueError(f"bound premises need convex bases (AE or RandSelect), got {basis.method.value}")
    if basis.T != sources.T:
        raise ValueError(f"basis encodes {basis.T} sources, suite has {sources.T}")


def _check_simplex(alpha: np.ndarray, n: int) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.size != n:
        raise ValueError(f"expected {n} coefficients, got {alpha.size}")
    if alpha.min() < -SIMPLEX_TOL or abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("coefficients must lie on the probability simplex")
    return alpha


def verify_addition_bound(suite: QuadraticTaskSuite, alpha: np.ndarray, basis: BasisModel | None = None,
                          constants: TheoryConstants | None = None) -> BoundReport:
    """Every task's gap at the merged model against L_i C (1 + epsilon)."""
    m = suite.matrix()
    k = constants or measure_constants(suite)
    details: dict[str, Any] = {"C": k.C, "epsilon": k.epsilon}
    if basis is None:
        a = _check_simplex(alpha, suite.T)
        theta = suite.theta0 + m.columns @ a
        details["task_coefficients"] = a.tolist()
    else:
        _require_convex(basis, m)
        a = _check_simplex(alpha, basis.M)
        theta = suite.theta0 + basis.B @ a
        phi = basis.W_e @ a
        details["task_coefficients"] = phi.tolist()
        details["min_task_coefficient"] = float(phi.min())
    records = []
    for i, t in enumerate(suite.tasks):
        gap = t.loss(theta) - t.loss(t.minimizer)
        bound = k.L[i] * k.C * (1.0 + k.epsilon)
        records.append({"task": i, "gap": gap, "bound": bound, "slack": bound - gap,
                        "pass": bool(gap <= bound + BOUND_TOL)})
    return BoundReport("addition" if basis is None else "addition_basis", True,
                       all(r["pass"] for r in records), records, details)


def verify_ood_bound(suite: QuadraticTaskSuite, target: QuadraticTask | None = None,
                     basis: BasisModel | None = None) -> BoundReport:
    """Target gap after the best-aligned single-vector merge against
    L_tar C (1 - gamma), or L_tar C (1 - rho gamma) when merging bases."""
    target = target if target is not None else suite.target
    if target is None:
        raise ValueError("no target task to verify against")
    m = suite.matrix()
    tau_tar = target.minimizer - suite.theta0
    k = measure_constants(suite, target, basis)
    details: dict[str, Any] = {"C": k.C, "gamma": k.gamma, "L_target": k.L_target, "i_star": k.i_star}
    if k.gamma is None or k.gamma <= 0:
        return BoundReport("ood", False, None, [], {**details, "reason": "no positively aligned source"})
    raw_bound = k.L_target * k.C * (1.0 - k.gamma)
    details["raw_bound"] = raw_bound
    if basis is None:
        merged = ood_merge(m, tau_tar)
        kind, bound = "ood", raw_bound
    else:
        _require_convex(basis, m)
        if np.any(m.columns.T @ tau_tar < -ALIGN_TOL * k.C):
            return BoundReport("ood_basis", False, None, [],
                               {**details, "reason": "a source is negatively aligned with the target"})
        merged = ood_merge(basis, tau_tar, sources=m)
        details["rho_hat"] = k.rho
        kind, bound = "ood_basis", k.L_target * k.C * (1.0 - k.rho * k.gamma)
    gap = target.loss(merged.theta) - target.loss(target.minimizer)
    rec = {"selected": merged.provenance["selected"], "gap": gap, "bound": bound, "slack": bound - gap,
           "pass": bool(gap <= bound + BOUND_TOL)}
    return BoundReport(kind, True, rec["pass"], [rec], details)


def verify_negation_bound(suite: QuadraticTaskSuite, j: int, alpha_j: float, basis: BasisModel | None = None,
                          reach_tol: float = 1e-6) -> BoundReport:
    """Control-task gaps L_k(theta0 - alpha tau_j) - L_k(theta0) for every k != j.

    Raw vectors are checked against L_k C (3/2 + eps). With a basis, tau_j is
    replaced by its reconstruction and two bounds are reported: the general
    one L_k C (5/2 + 2 eps) + L_k ||e_j||^2 and, when the fit reached the
    Frobenius lower bound within ``reach_tol``, the spectral one with
    lambda_{M+1}(G) in place of ||e_j||^2.
    """
    m = suite.matrix()
    if not 0 <= j < suite.T:
        raise IndexError(f"task index {j} out of range [0, {suite.T})")
    alpha_j = float(alpha_j)
    if not 0.0 <= alpha_j <= 1.0:
        raise ValueError("alpha_j must lie in [0, 1]")
    k = measure_constants(suite)
    tau = m.column(j)
    details: dict[str, Any] = {"C": k.C, "epsilon": k.epsilon, "task": j, "alpha": alpha_j}
    spectral_ok = False
    e2 = 0.0
    lam_next = 0.0
    if basis is not None:
        tau_hat = reconstruct(basis).column(j)
        e2 = float(np.sum((tau_hat - tau) ** 2))
        g = gram(m)
        sb = spectral_bounds(g, min(basis.M, m.T))
        lam_next = sb.spectral_lb
        reached = basis.loss - sb.frobenius_lb <= reach_tol
        spectral_ok = bool(reached)
        details.update(residual_norm2=e2, lambda_next=lam_next, fit_gap=basis.loss - sb.frobenius_lb,
                       reached_spectral_bound=spectral_ok)
        if spectral_ok:
            details["residual_within_spectral"] = bool(e2 <= lam_next + 1e-8)
        tau = tau_hat
    theta = suite.theta0 - alpha_j * tau
    records = []
    for i, t in enumerate(suite.tasks):
        if i == j:
            continue
        gap = t.loss(theta) - t.loss(suite.theta0)
        rec: dict[str, Any] = {"task": i, "gap": gap}
        if basis is None:
            b = k.L[i] * k.C * (1.5 + k.epsilon)
            rec.update(bound=b, slack=b - gap, **{"pass": bool(gap <= b + BOUND_TOL)})
        else:
            core = k.L[i] * k.C * (2.5 + 2.0 * k.epsilon)
            b = core + k.L[i] * e2
            rec.update(bound=b, slack=b - gap, **{"pass": bool(gap <= b + BOUND_TOL)})
            if spectral_ok:
                bs = core + k.L[i] * lam_next
                rec.update(spectral_bound=bs, spectral_pass=bool(gap <= bs + BOUND_TOL))
        records.append(rec)
    passed = all(r["pass"] and r.get("spectral_pass", True) for r in records)
    if basis is not None and spectral_ok:
        passed = passed and details["residual_within_spectral"]
    return BoundReport("negation" if basis is None else "negation_basis", True, passed, records, details)


def random_simplex(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(n))


# ---- serialization ---------------------------------------------------------------


def _task_factor_columns(t: QuadraticTask) -> np.ndarray:
    cols = [t.diag[:, None]]
    if t.lowrank is not None:
        cols.append(t.lowrank)
    return np.column_stack(cols)


def save_suite(suite: QuadraticTaskSuite, directory: str | Path) -> None:
    """``tasks.tvb`` (task vectors + theta0), ``hessians.tvb`` (diagonals and
    low-rank factors, then extra minimizers) and ``suite.json`` describing them."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    m = suite.matrix()
    save_collection(TaskVectorMatrix(m.columns, m.names, suite.theta0, {"profile": suite.profile}),
                    out / "tasks.tvb")
    cols, descr = [], []
    for t in suite.all_tasks():
        cols.append(_task_factor_columns(t))
        descr.append({"name": t.name, "rank": t.rank})
    extras = {}
    for role in ("target", "control"):
        t = getattr(suite, role)
        if t is not None:
            extras[role] = t.name
            cols.append((t.minimizer - suite.theta0)[:, None])
    factors = np.column_stack(cols)
    names = tuple(f"col{i}" for i in range(factors.shape[1]))
    save_collection(TaskVectorMatrix(factors, names), out / "hessians.tvb")
    (out / "suite.json").write_text(dumps({"format": "quadratic-suite/1", "profile": suite.profile,
                                           "hessians": descr, "extras": extras}))


def load_suite(directory: str | Path) -> QuadraticTaskSuite:
    src = Path(directory)
    meta = json.loads((src / "suite.json").read_text())
    m = load_collection(src / "tasks.tvb")
    factors = load_collection(src / "hessians.tvb").columns
    theta0 = m.base_point()
    pos = 0
    parsed = []
    for h in meta["hessians"]:
        r = int(h["rank"])
        D = factors[:, pos]
        U = factors[:, pos + 1:pos + 1 + r] if r else None
        parsed.append((h["name"], D, U))
        pos += 1 + r
    offsets = {}
    for role in ("target", "control"):
        if role in meta["extras"]:
            offsets[role] = factors[:, pos]
            pos += 1
    by_name = {name: (D, U) for name, D, U in parsed}
    tasks = tuple(QuadraticTask(theta0 + m.column(i), *by_name[n], n) for i, n in enumerate(m.names))
    extra = {role: QuadraticTask(theta0 + offsets[role], *by_name[meta["extras"][role]], meta["extras"][role])
             for role in offsets}
    return QuadraticTaskSuite(theta0, tasks, extra.get("target"), extra.get("control"), meta["profile"])
