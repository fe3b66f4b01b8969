"""Training objectives: grouped contrastive debiasing, PoE and focal fusion.

The debiasing loss works on a batch of prediction vectors z: intact examples
grouped by gold label, every perturbed view pooled into one shared group, and
one constant "dummy" row fixed at the uniform distribution inside that group.
Pulling group members together and pushing groups apart drives perturbed
predictions toward uniform (undecided) while intact predictions cluster by
label.

By default z is the softmax of the logits so all rows live on the simplex the
dummy belongs to; ``normalize_z = "raw"`` feeds literal logits instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

PERTURBED_GROUP = -1

FUSIONS = ("contrastive", "poe", "focal")


class ObjectiveError(Exception):
    pass


@dataclass
class DebiasConfig:
    lambda_weight: float = 0.1
    tau: float = 1.0
    fusion: str = "contrastive"
    gamma: float = 2.0
    normalize_z: str = "softmax"
    dummy_as_anchor: bool = True
    per_branch_groups: bool = False

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ObjectiveError("lambda must be >= 0")
        if self.tau <= 0:
            raise ObjectiveError("tau must be > 0")
        if self.gamma < 0:
            raise ObjectiveError("gamma must be >= 0")
        if self.fusion not in FUSIONS:
            raise ObjectiveError(f"fusion must be one of {FUSIONS}")
        if self.normalize_z not in ("softmax", "raw"):
            raise ObjectiveError("normalize_z must be 'softmax' or 'raw'")

    def to_dict(self) -> dict:
        return {
            "lambda": self.lambda_weight,
            "tau": self.tau,
            "fusion": self.fusion,
            "gamma": self.gamma,
            "normalize_z": self.normalize_z,
            "dummy_as_anchor": self.dummy_as_anchor,
            "per_branch_groups": self.per_branch_groups,
        }


@dataclass
class ZVector:
    """One prediction vector entering the contrastive batch."""

    values: np.ndarray
    is_dummy: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ObjectiveError("ZVector needs a 1-D value vector")
        if self.is_dummy:
            expected = np.full(self.values.shape, 1.0 / self.values.shape[0])
            if not (self.values == expected).all():
                raise ObjectiveError("a dummy ZVector must be exactly uniform")

    @classmethod
    def dummy(cls, n_classes: int) -> "ZVector":
        return cls(np.full(n_classes, 1.0 / n_classes), is_dummy=True)


@dataclass
class GroupAssignment:
    """Partition of the contrastive batch; perturbed views share one group.

    ``group_ids`` holds one id per batch row (gold label for intact rows,
    ``PERTURBED_GROUP`` or a negative per-branch id for perturbed rows and
    dummies). Dummy rows are listed in ``dummy_indices`` and must sit inside a
    perturbed group of size >= 2.
    """

    group_ids: np.ndarray
    n_intact: int
    dummy_indices: tuple[int, ...] = ()

    def __post_init__(self):
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        if self.group_ids.ndim != 1:
            raise ObjectiveError("group_ids must be 1-D")
        n = len(self.group_ids)
        if not 0 <= self.n_intact <= n:
            raise ObjectiveError("n_intact out of range")
        for d in self.dummy_indices:
            if not 0 <= d < n:
                raise ObjectiveError("dummy index out of range")
            gid = self.group_ids[d]
            if gid >= 0:
                raise ObjectiveError("a dummy must belong to a perturbed group")
            if int((self.group_ids == gid).sum()) < 2:
                raise ObjectiveError("a perturbed group with a dummy needs >= 2 members")

    @property
    def size(self) -> int:
        return len(self.group_ids)

    @property
    def n_perturbed(self) -> int:
        return self.size - self.n_intact - len(self.dummy_indices)


def build_groups(
    batch_labels,
    n_perturbed_views: int,
    per_branch: bool = False,
    n_branches: int = 1,
) -> GroupAssignment:
    """Label groups for intact rows plus the pooled perturbed group and dummy.

    Row layout: intact rows first (one group per gold label), then all
    perturbed views, then the dummy. With no perturbed views the dummy is
    omitted. ``per_branch=True`` gives every branch its own group and its own
    dummy (an ablation mode generalizing the pooled default).
    """
    labels = np.asarray(batch_labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ObjectiveError("batch_labels must be 1-D")
    if np.any(labels < 0):
        raise ObjectiveError("labels must be non-negative")
    if n_perturbed_views < 0:
        raise ObjectiveError("n_perturbed_views must be >= 0")
    if n_perturbed_views == 0:
        return GroupAssignment(labels, n_intact=len(labels))
    if not per_branch:
        ids = np.concatenate([labels, np.full(n_perturbed_views + 1, PERTURBED_GROUP)])
        return GroupAssignment(ids, n_intact=len(labels), dummy_indices=(len(ids) - 1,))
    if n_branches < 1 or n_perturbed_views % n_branches:
        raise ObjectiveError("per-branch grouping needs views divisible by n_branches")
    per = n_perturbed_views // n_branches
    branch_ids = np.concatenate([np.full(per, -(b + 1)) for b in range(n_branches)])
    dummy_ids = np.array([-(b + 1) for b in range(n_branches)])
    ids = np.concatenate([labels, branch_ids, dummy_ids])
    dummies = tuple(range(len(labels) + n_perturbed_views, len(ids)))
    return GroupAssignment(ids, n_intact=len(labels), dummy_indices=dummies)


def uniform_dummy_row(n_classes: int, dtype=np.float64) -> T.Tensor:
    return T.constant(np.full((1, n_classes), 1.0 / n_classes), dtype=dtype)


def _as_tensor_rows(z) -> tuple[T.Tensor, tuple[int, ...]]:
    """Accept a ``(N, C)`` tensor or a list of ZVector; returns rows + dummy slots."""
    if isinstance(z, T.Tensor):
        return z, ()
    rows = []
    dummies = []
    for i, zv in enumerate(z):
        if not isinstance(zv, ZVector):
            raise ObjectiveError("expected a Tensor or a list of ZVector")
        rows.append(zv.values)
        if zv.is_dummy:
            dummies.append(i)
    return T.constant(np.stack(rows)), tuple(dummies)


def contrastive_debias_loss(z, groups: GroupAssignment, tau: float = 1.0, dummy_as_anchor: bool = True) -> T.Tensor:
    """Grouped contrastive loss over the ``2n+1``-row prediction batch.

    For each anchor i with positives G(i) (same group, excluding i):

        -1/|G(i)| * sum_{j in G(i)} log( exp(z_i.z_j / tau)
                                         / sum_{k != i} exp(z_i.z_k / tau) )

    Anchors whose group has no other member contribute 0. Stabilized by
    per-anchor max subtraction inside the log-softmax. The dummy row takes
    part as anchor (unless ``dummy_as_anchor`` is off) and as candidate, but
    being a constant it receives no gradient.
    """
    if tau <= 0:
        raise ObjectiveError("tau must be > 0")
    z_rows, zv_dummies = _as_tensor_rows(z)
    if zv_dummies and not groups.dummy_indices:
        groups = GroupAssignment(groups.group_ids, groups.n_intact, zv_dummies)
    if z_rows.ndim != 2 or z_rows.shape[0] != groups.size:
        raise ObjectiveError(
            f"z has shape {z_rows.shape} but groups describe {groups.size} rows"
        )
    if not np.all(np.isfinite(z_rows.data)):
        raise ObjectiveError("z contains non-finite values")
    if groups.n_intact == 0:
        raise ObjectiveError("batch has no intact elements")
    if groups.n_perturbed == 0:
        raise ObjectiveError("batch has no perturbed elements")
    if not groups.dummy_indices:
        raise ObjectiveError("a dummy row is required (one per perturbed group)")

    n = groups.size
    gids = groups.group_ids
    same = gids[:, None] == gids[None, :]
    np.fill_diagonal(same, False)
    pos_counts = same.sum(axis=1).astype(z_rows.dtype)
    weights = np.zeros((n, n), dtype=z_rows.dtype)
    nonzero = pos_counts > 0
    weights[nonzero] = same[nonzero] / pos_counts[nonzero, None]
    if not dummy_as_anchor:
        for d in groups.dummy_indices:
            weights[d, :] = 0.0

    sims = T.scale(T.matmul(z_rows, T.transpose_last2(z_rows)), 1.0 / tau)
    diag_mask = T.constant(np.where(np.eye(n, dtype=bool), -1e9, 0.0), dtype=z_rows.dtype)
    logp = T.log_softmax(T.add(sims, diag_mask), axis=1)
    return T.scale(T.sum(T.mask_apply(logp, weights)), -1.0)


def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean softmax cross-entropy over the batch; labels must be in range."""
    labels = np.asarray(labels)
    return T.scale(T.mean(T.gather(T.log_softmax(logits, axis=1), labels)), -1.0)


def combined_loss(z_intact: T.Tensor, labels, debias_loss: T.Tensor | None, lambda_weight: float) -> T.Tensor:
    """Intact cross-entropy plus ``lambda * debias`` (plain CE when absent)."""
    if lambda_weight < 0:
        raise ObjectiveError("lambda must be >= 0")
    ce = cross_entropy(z_intact, labels)
    if debias_loss is None:
        return ce
    return T.add(ce, T.scale(debias_loss, float(lambda_weight)))


def poe_loss(z_intact: T.Tensor, z_biased: list[T.Tensor], labels) -> T.Tensor:
    """Product-of-experts: CE on the sum of per-expert log-probabilities."""
    if not z_biased:
        raise ObjectiveError("poe_loss needs at least one biased branch")
    combined = T.log_softmax(z_intact, axis=1)
    for zb in z_biased:
        if zb.shape != z_intact.shape:
            raise ObjectiveError("biased logits must match intact logits in shape")
        combined = T.add(combined, T.log_softmax(zb, axis=1))
    return cross_entropy(combined, labels)


def focal_loss(z_intact: T.Tensor, z_biased: list[T.Tensor], labels, gamma: float = 2.0) -> T.Tensor:
    """Per-example CE down-weighted by branch confidence in the gold label.

    weight_i = (1 - mean_b softmax(z_b)[y_i]) ** gamma. Fully bias-explained
    examples (mean gold prob 1) are ignored; gamma = 0 recovers plain CE.
    """
    if not z_biased:
        raise ObjectiveError("focal_loss needs at least one biased branch")
    if gamma < 0:
        raise ObjectiveError("gamma must be >= 0")
    labels = np.asarray(labels)
    gold = None
    for zb in z_biased:
        if zb.shape != z_intact.shape:
            raise ObjectiveError("biased logits must match intact logits in shape")
        p = T.gather(T.softmax(zb, axis=1), labels)
        gold = p if gold is None else T.add(gold, p)
    mean_gold = T.scale(gold, 1.0 / len(z_biased))
    weight = T.powc(T.shift(T.scale(mean_gold, -1.0), 1.0), float(gamma))
    ce_per_example = T.scale(T.gather(T.log_softmax(z_intact, axis=1), labels), -1.0)
    return T.mean(T.mul(weight, ce_per_example))


def build_z_matrix(
    intact_logits: T.Tensor,
    branch_logits: list[T.Tensor],
    normalize_z: str = "softmax",
    include_dummy: bool = True,
) -> T.Tensor:
    """Stack intact rows, branch rows, and the uniform dummy into ``(N, C)``."""
    parts = [intact_logits] + list(branch_logits)
    if normalize_z == "softmax":
        parts = [T.softmax(p, axis=1) for p in parts]
    elif normalize_z != "raw":
        raise ObjectiveError("normalize_z must be 'softmax' or 'raw'")
    if include_dummy:
        parts.append(uniform_dummy_row(intact_logits.shape[1], dtype=intact_logits.dtype))
    return T.concat_rows(parts)
