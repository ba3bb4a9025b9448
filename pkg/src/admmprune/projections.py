"""Sparsity constraint sets and their Euclidean projections.

Each constraint bounds the number of nonzero *groups* of a 4-D weight tensor
``(A, B, C, D)``:

* ``FILTER``  -- groups are filters ``t[a, :, :, :]``  (GEMM rows)
* ``CHANNEL`` -- groups are channels ``t[:, b, :, :]`` (blocks of GEMM columns)
* ``SHAPE``   -- groups are positions ``t[:, b, c, d]`` (single GEMM columns)
* ``IRREGULAR`` -- groups are single elements

The nearest feasible point in Frobenius distance keeps the ``budget`` groups
with the largest squared norms and zeroes the rest.  Equal norms are broken
toward the smaller group index, so the projection is a deterministic
function of its input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, ConstraintError
from .tensor import PruneMask, check_tensor4


class Kind(str, enum.Enum):
    FILTER = "filter"
    CHANNEL = "channel"
    SHAPE = "shape"
    IRREGULAR = "irregular"
    COMPOSITE = "composite"


GROUP_KINDS = (Kind.FILTER, Kind.CHANNEL, Kind.SHAPE)
# coarse-to-fine order used when a composite is built from unordered input
_COMPOSITE_ORDER = {Kind.FILTER: 0, Kind.CHANNEL: 1, Kind.SHAPE: 2}

# axes reduced to obtain one norm per group
_REDUCE_AXES = {
    Kind.FILTER: (1, 2, 3),
    Kind.CHANNEL: (0, 2, 3),
    Kind.SHAPE: (0,),
}


def group_count(dims, kind):
    a, b, c, d = dims
    kind = Kind(kind)
    if kind is Kind.FILTER:
        return a
    if kind is Kind.CHANNEL:
        return b
    if kind is Kind.SHAPE:
        return b * c * d
    if kind is Kind.IRREGULAR:
        return a * b * c * d
    raise ConstraintError(f"no group count for kind {kind.value}")


@dataclass(frozen=True)
class SparsityConstraint:
    """Upper bound ``budget`` on the number of nonzero groups of ``kind``.

    A composite constraint carries its member constraints in ``members``
    and a budget of 0.
    """

    kind: Kind
    budget: int = 0
    members: Tuple["SparsityConstraint", ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.COMPOSITE:
            kinds = [m.kind for m in self.members]
            if not kinds:
                raise ConstraintError("composite constraint needs members")
            if len(set(kinds)) != len(kinds):
                raise ConstraintError("composite constraint has duplicate kinds")
            if Kind.IRREGULAR in kinds or Kind.COMPOSITE in kinds:
                raise ConstraintError("composite members must be filter/channel/shape")
        else:
            if self.members:
                raise ConstraintError("only composite constraints carry members")
            if int(self.budget) != self.budget or self.budget < 1:
                raise ConstraintError(f"budget must be a positive integer, got {self.budget}")
            object.__setattr__(self, "budget", int(self.budget))

    @classmethod
    def composite(cls, *members):
        """Composite of group constraints, applied filter -> channel -> shape."""
        members = tuple(sorted(members, key=lambda m: _COMPOSITE_ORDER.get(Kind(m.kind), 99)))
        return cls(Kind.COMPOSITE, 0, members)

    def validate(self, dims):
        """Raise :class:`ConstraintError` if the budget does not fit ``dims``."""
        if self.kind is Kind.COMPOSITE:
            for m in self.members:
                m.validate(dims)
            return
        n = group_count(dims, self.kind)
        if self.budget > n:
            raise ConstraintError(
                f"{self.kind.value} budget {self.budget} exceeds group count {n} for dims {tuple(dims)}")

    def to_dict(self):
        if self.kind is Kind.COMPOSITE:
            return {"kind": "composite", "members": [m.to_dict() for m in self.members]}
        return {"kind": self.kind.value, "budget": self.budget}

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "composite":
            return cls.composite(*(cls.from_dict(m) for m in d["members"]))
        return cls(Kind(d["kind"]), int(d["budget"]))


def budget_from_fraction(fraction_kept, dims, kind):
    """Integer budget for keeping ``fraction_kept`` of the groups (half-up)."""
    if not 0 < fraction_kept <= 1:
        raise ConfigError(f"fraction kept must lie in (0, 1], got {fraction_kept}")
    n = group_count(dims, kind)
    budget = int(np.floor(fraction_kept * n + 0.5))
    if budget < 1:
        raise ConfigError(
            f"keeping {fraction_kept} of {n} {Kind(kind).value} groups rounds to zero")
    return budget


def constraint_for_sparsity(kind, sparsity, dims):
    """Constraint that prunes (at least) ``sparsity`` of the groups of ``kind``."""
    return SparsityConstraint(Kind(kind), budget_from_fraction(1.0 - sparsity, dims, kind))


def group_norms(t, kind):
    """Squared Frobenius norm of every group of ``t``.

    Shape-wise norms are returned flat in ``(b, c, d)`` order, ``d`` fastest.
    """
    t = check_tensor4(t)
    kind = Kind(kind)
    if kind not in _REDUCE_AXES:
        raise ConstraintError(f"group_norms does not support kind {kind.value}")
    return np.sum(t * t, axis=_REDUCE_AXES[kind]).ravel()


def _top_k(scores, k):
    # stable sort on the negated scores: ties keep the lower index first
    order = np.argsort(-scores, kind="stable")
    keep = np.zeros(scores.shape[0], dtype=bool)
    keep[order[:k]] = True
    return keep


def _keep_mask(t, c):
    """Boolean mask (congruent to ``t``) of entries kept by projecting onto ``c``."""
    a, b, h, w = t.shape
    if c.kind is Kind.IRREGULAR:
        return _top_k(np.abs(t).ravel(), c.budget).reshape(t.shape)
    keep = _top_k(group_norms(t, c.kind), c.budget)
    if c.kind is Kind.FILTER:
        return np.broadcast_to(keep[:, None, None, None], t.shape)
    if c.kind is Kind.CHANNEL:
        return np.broadcast_to(keep[None, :, None, None], t.shape)
    return np.broadcast_to(keep.reshape(1, b, h, w), t.shape)


def project(t, c):
    """Euclidean projection of ``t`` onto the constraint set ``c``.

    Kept groups are copied unchanged; all other entries become exactly 0.
    Composite constraints are projected member by member in their stored
    (coarse-to-fine) order, which keeps every member satisfied but is not the
    exact projection onto the intersection.
    """
    t = check_tensor4(t)
    c.validate(t.shape)
    if c.kind is Kind.COMPOSITE:
        out = t
        for m in c.members:
            out = project(out, m)
        return out
    return np.where(_keep_mask(t, c), t, np.zeros((), dtype=t.dtype))


def nonzero_groups(t, kind):
    """Number of groups of ``kind`` holding at least one nonzero entry."""
    t = check_tensor4(t)
    kind = Kind(kind)
    if kind is Kind.IRREGULAR:
        return int(np.count_nonzero(t))
    return int(np.count_nonzero(np.any(t != 0, axis=_REDUCE_AXES[kind])))


def check_constraint(t, c):
    """True iff ``t`` lies in the constraint set (exact zero test)."""
    t = check_tensor4(t)
    if c.kind is Kind.COMPOSITE:
        return all(check_constraint(t, m) for m in c.members)
    return nonzero_groups(t, c.kind) <= c.budget


def mask_from(t):
    """Keep-mask with a 1 exactly where ``t`` is nonzero."""
    return PruneMask(np.asarray(t) != 0)


def sparsity(t, kind=Kind.IRREGULAR):
    """Fraction of groups of ``kind`` that are entirely zero."""
    t = check_tensor4(t)
    return 1.0 - nonzero_groups(t, kind) / group_count(t.shape, kind)
