"""Search for strictly positive spanning vectors of the top-M Gram eigenspace.

A softmax encoder can only reach the Eckart-Young optimum when the top-M
eigenspace of G contains M linearly independent strictly positive vectors.
The search below is randomized and bounded: a miss means "not found", not
"impossible".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..vecstore import GramMatrix

DEFAULT_BUDGET = 10_000
_POS_TOL = 1e-9


@dataclass(frozen=True)
class Certificate:
    achievable: bool
    witness: np.ndarray | None
    candidates_tried: int
    degenerate: bool
    conclusive: bool

    def summary(self) -> dict:
        return {
            "achievable": self.achievable,
            "conclusive": self.conclusive,
            "candidates_tried": self.candidates_tried,
            "degenerate_eigengap": self.degenerate,
        }


def _positive(x: np.ndarray) -> bool:
    return bool(np.min(x) > _POS_TOL * np.max(np.abs(x)))


def achievability_certificate(
    g: GramMatrix, M: int, budget: int = DEFAULT_BUDGET, seed: int = 0
) -> Certificate:
    """Look for M independent strictly positive vectors in span(top-M eigenvectors).

    Witness columns are scaled onto the probability simplex so they can be fed
    straight into :func:`softmax_logits_for`.
    """
    t = g.size
    if not 1 <= M <= t:
        raise ValueError(f"M={M} out of range [1, {t}]")
    w = g.eigenvalues
    S = g.eigenvectors[:, :M]
    degenerate = M < t and w[M - 1] - w[M] <= 1e-12 * max(w[0], 1e-300)

    rng = np.random.default_rng(seed)

    def candidates():
        yield S @ (S.T @ np.ones(t))
        for m in range(M):
            yield S[:, m]
            yield -S[:, m]
        while True:
            yield S @ rng.standard_normal(M)

    anchor = None
    tried = 0
    for x in candidates():
        if tried >= budget:
            break
        tried += 1
        if _positive(x):
            anchor = x
            break
        if _positive(-x):
            anchor = -x
            break
    if anchor is None:
        return Certificate(False, None, tried, degenerate, False)

    # positivity is an open condition: small in-subspace moves around the anchor stay positive
    vecs = [anchor]
    slack = 0.5 * float(np.min(anchor))
    while len(vecs) < M and tried < budget:
        tried += 1
        step = S @ rng.standard_normal(M)
        step *= slack / max(np.max(np.abs(step)), 1e-300)
        cand = anchor + step
        trial = np.column_stack(vecs + [cand])
        sv = np.linalg.svd(trial / np.linalg.norm(trial, axis=0), compute_uv=False)
        if sv[-1] > 1e-8 and _positive(cand):
            vecs.append(cand)
    if len(vecs) < M:
        return Certificate(False, None, tried, degenerate, False)
    X = np.column_stack(vecs)
    return Certificate(True, X / X.sum(axis=0), tried, degenerate, True)
