"""Sequential projection along linear extensions and multi-head combination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import EPS_FEAS, Halfspace, project
from .poset import LinearExtension, SafetyPoset, maximal_elements

__all__ = [
    "EmptyHeads",
    "OverrideEvent",
    "ProjectionHead",
    "HeadCombiner",
    "softmax",
    "gumbel_noise",
    "sequential_project",
    "run_heads",
    "audit_poset_respecting",
    "check_mixture_safety_preconditions",
    "project_batch",
    "batch_override_events",
]


class EmptyHeads(ValueError):
    pass


@dataclass(frozen=True)
class OverrideEvent:
    """Constraint ``flipped`` went from satisfied to violated at projection ``step``."""

    step: int
    enforced: int
    flipped: int
    margin_before: float
    margin_after: float
    t: int | None = None
    pre: tuple[float, ...] | None = None
    post: tuple[float, ...] | None = None

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "step": self.step,
            "enforced": self.enforced,
            "flipped": self.flipped,
            "margin_before": self.margin_before,
            "margin_after": self.margin_after,
        }


@dataclass(frozen=True)
class ProjectionHead:
    extension: LinearExtension
    head_index: int = 0
    nominal_policy_id: int | None = None

    @classmethod
    def build(cls, poset: SafetyPoset, order: Sequence[int], head_index: int = 0,
              nominal_policy_id: int | None = None) -> "ProjectionHead":
        ext = order if isinstance(order, LinearExtension) else LinearExtension(tuple(order))
        ext.check(poset)
        return cls(ext, head_index, head_index if nominal_policy_id is None else nominal_policy_id)


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # rng.random is in [0, 1); keep the log finite
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return -np.log(-np.log(u))


@dataclass
class HeadCombiner:
    mode: str = "mixture"  # mixture | hard | gumbel
    logits: np.ndarray = field(default_factory=lambda: np.zeros(1))
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in ("mixture", "hard", "gumbel"):
            raise ValueError(f"unknown combiner mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        self.logits = np.asarray(self.logits, dtype=float).reshape(-1)

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def selected(self) -> int:
        # np.argmax returns the first maximum: ties go to the lowest index
        return int(np.argmax(self.logits))

    def combination_weights(self, batch: int, *, training: bool = False,
                            rng: np.random.Generator | None = None,
                            noise: np.ndarray | None = None) -> np.ndarray:
        """Per-sample head weights, shape (batch, H)."""
        H = self.logits.shape[0]
        if self.mode == "mixture":
            return np.broadcast_to(self.weights, (batch, H)).copy()
        if self.mode == "gumbel" and training:
            if noise is None:
                if rng is None:
                    raise ValueError("gumbel training needs an rng or explicit noise")
                noise = gumbel_noise(rng, (batch, H))
            return softmax((self.logits[None, :] + noise) / self.temperature)
        w = np.zeros((batch, H))
        w[:, self.selected] = 1.0
        return w


def _margins(halfspaces: Sequence[Halfspace], u) -> np.ndarray:
    return np.array([h.margin(u) for h in halfspaces])


def sequential_project(halfspaces: Sequence[Halfspace], ext: LinearExtension | Sequence[int], u_nom,
                       *, t: int | None = None) -> tuple[np.ndarray, list[OverrideEvent]]:
    """Project ``u_nom`` onto each halfspace in extension order.

    ``halfspaces[j]`` is the halfspace of constraint ``j``. Returns the final
    control and every override: a constraint enforced at an earlier step that
    goes from satisfied to violated, with the step that caused it. Constraints
    not yet enforced are not tracked; their own step repairs them.
    """
    order = tuple(ext)
    if len(order) != len(halfspaces):
        raise ValueError("extension length must equal the number of constraints")
    u = np.array(u_nom, dtype=float, copy=True)
    events: list[OverrideEvent] = []
    before = _margins(halfspaces, u)
    for k, j in enumerate(order):
        new = project(halfspaces[j], u)
        after = _margins(halfspaces, new)
        for i in order[:k]:
            if not (before[i] >= -EPS_FEAS and after[i] < -EPS_FEAS):
                continue
            events.append(OverrideEvent(k + 1, j, int(i), float(before[i]), float(after[i]), t,
                                        tuple(u), tuple(new)))
        u, before = new, after
    return u, events


def run_heads(heads: Sequence[ProjectionHead], combiner: HeadCombiner, halfspaces: Sequence[Halfspace],
              u_noms: Sequence, *, training: bool = False, rng: np.random.Generator | None = None):
    """Project each head's nominal control and combine.

    Returns ``(control, per_head_controls, info)``; ``info`` carries the
    weights used and, for one-hot selection, the chosen head.
    """
    if not heads:
        raise EmptyHeads("at least one head is required")
    if len(heads) != len(u_noms):
        raise ValueError("one nominal control per head is required")
    if combiner.logits.shape[0] != len(heads):
        raise ValueError("combiner logits must have one entry per head")
    outs, events = [], []
    for head, u_nom in zip(heads, u_noms):
        u, ev = sequential_project(halfspaces, head.extension, u_nom)
        outs.append(u)
        events.append(ev)
    per_head = np.array(outs)
    w = combiner.combination_weights(1, training=training, rng=rng)[0]
    info = {"weights": w, "events": events}
    if combiner.mode == "hard" or (combiner.mode == "gumbel" and not training):
        info["selected"] = combiner.selected
        return per_head[combiner.selected].copy(), per_head, info
    return w @ per_head, per_head, info


def audit_poset_respecting(events: Sequence[OverrideEvent], poset: SafetyPoset) -> list[OverrideEvent]:
    """Events where a constraint was overridden by one that does not dominate it.

    An empty list means the projection was poset-respecting.
    """
    return [e for e in events if not poset.precedes(e.flipped, e.enforced)]


def check_mixture_safety_preconditions(head_outputs, halfspaces: Sequence[Halfspace], poset: SafetyPoset,
                                       tol: float = EPS_FEAS) -> dict:
    """For every maximal constraint, whether all head outputs lie in its halfspace.

    When every entry holds, any convex mixture of the heads satisfies all
    maximal constraints.
    """
    head_outputs = np.atleast_2d(np.asarray(head_outputs, dtype=float))
    per_constraint = {}
    for j in maximal_elements(poset):
        per_constraint[j] = bool(np.all(head_outputs @ halfspaces[j].a - halfspaces[j].c >= -tol))
    flagged = sorted(j for j, ok in per_constraint.items() if not ok)
    return {"maximal": per_constraint, "flagged": flagged, "all_pass": not flagged}


def project_batch(A, c, orders, U, record: bool = False, backend=None):
    """Batched multi-head sequential projection; see ``_pykernels.project_heads``."""
    impl = kernels if backend is None else kernels.get_backend(backend)
    return impl.project_heads(A, c, np.asarray(orders, dtype=np.int64), U, record)


def batch_override_events(A, c, orders, steps, eps: float = EPS_FEAS):
    """Override flips from recorded intermediate controls, as in :func:`sequential_project`.

    Returns integer rows ``(batch, head, step, enforced, flipped)`` plus the
    margins before/after each flip.
    """
    orders = np.asarray(orders, dtype=np.int64)
    H, N = orders.shape
    # margins[b, h, k, i] = A[b, i] . steps[b, h, k] - c[b, i]
    margins = np.einsum("bim,bhkm->bhki", A, steps) - c[:, None, None, :]
    position = np.argsort(orders, axis=1)  # position[h, i]: step index at which head h enforces i
    enforced_before = position[:, None, :] < np.arange(N)[None, :, None]  # (H, N steps, N constraints)
    flip = (margins[:, :, :-1, :] >= -eps) & (margins[:, :, 1:, :] < -eps) & enforced_before[None]
    b, h, k, i = np.nonzero(flip)
    rows = np.stack([b, h, k + 1, orders[h, k], i], axis=1) if b.size else np.zeros((0, 5), dtype=np.int64)
    return rows, margins[b, h, k, i], margins[b, h, k + 1, i]
