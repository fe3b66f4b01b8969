"""Biased-view perturbation operators.

Two families: explicit operators rewrite the token sequences of an example
(shuffle, drop one constituent, drop a fraction of tokens), implicit operators
leave tokens intact and instead weaken the model (encode with only the first k
layers) or corrupt the pooled representation (zero a fraction of its values).

All operators are pure: the same (input, spec, seed) always yields the same
view. Randomness comes from a per-call integer seed; training derives one seed
per (example, branch, epoch) with ``derive_seed`` so draws are fresh every
epoch yet reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import Tensor, mask_apply


class PerturbError(Exception):
    pass


class Kind(Enum):
    SHUFFLE = "shuffle"
    DROP_CONSTITUENT = "drop_constituent"
    FRACTIONAL_DROP = "fractional_drop"
    LAYER_TRUNCATE = "layer_truncate"
    REP_ZERO = "rep_zero"


EXPLICIT_KINDS = (Kind.SHUFFLE, Kind.DROP_CONSTITUENT, Kind.FRACTIONAL_DROP)
IMPLICIT_KINDS = (Kind.LAYER_TRUNCATE, Kind.REP_ZERO)


@dataclass(frozen=True)
class PerturbationSpec:
    """Declarative description of one bias branch."""

    kind: Kind
    constituent: int | None = None  # 1-based, DROP_CONSTITUENT only
    fraction: float | None = None  # FRACTIONAL_DROP only
    k_layers: int | None = None  # LAYER_TRUNCATE only
    m_fraction: float | None = None  # REP_ZERO only
    seed_stream: int = 0

    def __post_init__(self):
        if self.kind is Kind.DROP_CONSTITUENT:
            if self.constituent is None or self.constituent < 1:
                raise PerturbError("drop_constituent needs a 1-based constituent index")
        elif self.kind is Kind.FRACTIONAL_DROP:
            if self.fraction is None or not 0.0 < self.fraction < 1.0:
                raise PerturbError("fractional_drop needs 0 < fraction < 1")
        elif self.kind is Kind.LAYER_TRUNCATE:
            if self.k_layers is None or self.k_layers < 1:
                raise PerturbError("layer_truncate needs k >= 1")
        elif self.kind is Kind.REP_ZERO:
            if self.m_fraction is None or not 0.0 <= self.m_fraction <= 1.0:
                raise PerturbError("rep_zero needs 0 <= m_fraction <= 1")

    @property
    def is_explicit(self) -> bool:
        return self.kind in EXPLICIT_KINDS

    def key(self) -> str:
        """Canonical config-string form; doubles as the branch-head key."""
        if self.kind is Kind.SHUFFLE:
            return "shuffle"
        if self.kind is Kind.DROP_CONSTITUENT:
            return f"drop_constituent:{self.constituent}"
        if self.kind is Kind.FRACTIONAL_DROP:
            return f"fractional_drop:{_fmt(self.fraction)}"
        if self.kind is Kind.LAYER_TRUNCATE:
            return f"layer_truncate:{self.k_layers}"
        return f"rep_zero:{_fmt(self.m_fraction)}"


def _fmt(x: float) -> str:
    s = f"{x:g}"
    return s


def parse_branch_spec(text: str, seed_stream: int = 0) -> PerturbationSpec:
    """Parse a config string like ``"drop_constituent:1"`` or ``"rep_zero:0.9"``."""
    name, _, arg = text.strip().partition(":")
    try:
        if name == "shuffle":
            if arg:
                raise PerturbError("shuffle takes no argument")
            return PerturbationSpec(Kind.SHUFFLE, seed_stream=seed_stream)
        if name == "drop_constituent":
            return PerturbationSpec(Kind.DROP_CONSTITUENT, constituent=int(arg), seed_stream=seed_stream)
        if name == "fractional_drop":
            return PerturbationSpec(Kind.FRACTIONAL_DROP, fraction=float(arg), seed_stream=seed_stream)
        if name == "layer_truncate":
            return PerturbationSpec(Kind.LAYER_TRUNCATE, k_layers=int(arg), seed_stream=seed_stream)
        if name == "rep_zero":
            return PerturbationSpec(Kind.REP_ZERO, m_fraction=float(arg), seed_stream=seed_stream)
    except ValueError as exc:
        raise PerturbError(f"bad argument in branch spec '{text}'") from exc
    raise PerturbError(f"unknown branch spec '{text}'")


def parse_branch_specs(texts) -> list[PerturbationSpec]:
    specs = [parse_branch_spec(t, seed_stream=i) for i, t in enumerate(texts)]
    keys = [s.key() for s in specs]
    if len(set(keys)) != len(keys):
        raise PerturbError(f"duplicate branch specs in {list(texts)}")
    return specs


@dataclass
class BiasedView:
    """One perturbed view of an example.

    Explicit views carry rewritten token sequences; implicit views pass the
    original tokens through and the spec tells the encoder what to weaken.
    """

    origin_example_id: int | None
    spec: PerturbationSpec
    constituents: list[list[int]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Seed derivation: one master seed, one independent stream per
# (epoch, branch, example). splitmix64 finalizer over the mixed-in parts.
# ---------------------------------------------------------------------------

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GAMMA) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(master_seed: int, *parts: int) -> int:
    """Deterministic child seed for stream (master, *parts).

    Each part is folded in with the splitmix64 finalizer, so streams that
    differ in any component are statistically independent.
    """
    state = _splitmix64(master_seed & _MASK)
    for p in parts:
        state = _splitmix64((state ^ (int(p) & _MASK)) & _MASK)
    return state


# ---------------------------------------------------------------------------
# Explicit operators.
# ---------------------------------------------------------------------------


def _fisher_yates(tokens: list[int], rng: np.random.Generator) -> list[int]:
    # Classic descending Fisher-Yates walk: j = integers(0, i + 1) swaps into i.
    out = list(tokens)
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        out[i], out[j] = out[j], out[i]
    return out


def shuffle_tokens(example, seed: int) -> BiasedView:
    """Shuffle token order uniformly at random, independently per constituent.

    The RNG is ``numpy.random.default_rng(seed)`` driving a descending
    Fisher-Yates walk; constituents are visited in order and share the stream.
    """
    constituents = example.constituents
    if sum(len(c) for c in constituents) < 1:
        raise PerturbError("shuffle_tokens: example has no tokens")
    rng = np.random.default_rng(seed)
    shuffled = [_fisher_yates(c, rng) for c in constituents]
    return BiasedView(example.example_id, PerturbationSpec(Kind.SHUFFLE), shuffled)


def drop_constituent(example, j: int) -> BiasedView:
    """Remove the j-th constituent (1-based); the rest keep their order."""
    constituents = example.constituents
    p = len(constituents)
    if p < 2:
        raise PerturbError("drop_constituent: need at least two constituents")
    if not 1 <= j <= p:
        raise PerturbError(f"drop_constituent: index {j} out of range for p={p}")
    kept = [list(c) for i, c in enumerate(constituents, start=1) if i != j]
    return BiasedView(
        example.example_id, PerturbationSpec(Kind.DROP_CONSTITUENT, constituent=j), kept
    )


def fractional_drop(example, fraction: float, seed: int) -> BiasedView:
    """Drop exactly ``floor(fraction * n_j)`` tokens per constituent.

    Drop positions are drawn uniformly without replacement; survivors keep
    their relative order and at least one token survives per constituent.
    """
    if not 0.0 < fraction < 1.0:
        raise PerturbError("fractional_drop: need 0 < fraction < 1")
    rng = np.random.default_rng(seed)
    out = []
    for c in example.constituents:
        n = len(c)
        if n == 0:
            raise PerturbError("fractional_drop: empty constituent")
        n_drop = min(math.floor(fraction * n), n - 1)
        dropped = set(rng.choice(n, size=n_drop, replace=False).tolist()) if n_drop else set()
        out.append([tok for i, tok in enumerate(c) if i not in dropped])
    return BiasedView(
        example.example_id, PerturbationSpec(Kind.FRACTIONAL_DROP, fraction=fraction), out
    )


# ---------------------------------------------------------------------------
# Implicit operators.
# ---------------------------------------------------------------------------


def layer_truncate_spec(example, k: int, n_layers: int) -> BiasedView:
    """Pass-through view instructing the encoder to stop after layer ``k``."""
    if not 1 <= k <= n_layers:
        raise PerturbError(f"layer_truncate: k={k} out of range for {n_layers} layers")
    return BiasedView(
        example.example_id,
        PerturbationSpec(Kind.LAYER_TRUNCATE, k_layers=k),
        [list(c) for c in example.constituents],
    )


def rep_zero_count(m_fraction: float, d_model: int) -> int:
    """Number of positions zeroed: ``m_fraction * d_model`` rounded half-up."""
    return min(int(math.floor(m_fraction * d_model + 0.5)), d_model)


def rep_zero_mask(m_fraction: float, d_model: int, seed: int) -> np.ndarray:
    """Binary keep-mask with exactly ``rep_zero_count`` zeros, drawn uniformly."""
    if not 0.0 <= m_fraction <= 1.0:
        raise PerturbError("rep_zero: need 0 <= m_fraction <= 1")
    n_zero = rep_zero_count(m_fraction, d_model)
    mask = np.ones(d_model)
    if n_zero:
        rng = np.random.default_rng(seed)
        mask[rng.choice(d_model, size=n_zero, replace=False)] = 0.0
    return mask


def rep_zero(rep: Tensor, m_fraction: float, seed: int) -> Tensor:
    """Zero a fraction of a pooled representation; grads flow only through survivors.

    ``rep`` may be a single vector ``(d,)`` or a batch ``(n, d)``; with a batch
    every row uses the same seed, so pass per-row seeds via ``rep_zero_batch``.
    """
    d = rep.shape[-1]
    mask = rep_zero_mask(m_fraction, d, seed)
    full = np.broadcast_to(mask, rep.shape)
    return mask_apply(rep, full)


def rep_zero_batch(rep: Tensor, m_fraction: float, seeds) -> Tensor:
    """Row-wise ``rep_zero`` over a ``(n, d)`` batch with one seed per row."""
    n, d = rep.shape
    if len(seeds) != n:
        raise PerturbError("rep_zero_batch: need one seed per row")
    mask = np.stack([rep_zero_mask(m_fraction, d, s) for s in seeds])
    return mask_apply(rep, mask)


def make_view(example, spec: PerturbationSpec, seed: int, n_layers: int | None = None) -> BiasedView:
    """Apply one branch spec to an example (REP_ZERO yields a pass-through view)."""
    if spec.kind is Kind.SHUFFLE:
        view = shuffle_tokens(example, seed)
    elif spec.kind is Kind.DROP_CONSTITUENT:
        view = drop_constituent(example, spec.constituent)
    elif spec.kind is Kind.FRACTIONAL_DROP:
        view = fractional_drop(example, spec.fraction, seed)
    elif spec.kind is Kind.LAYER_TRUNCATE:
        if n_layers is None:
            raise PerturbError("layer_truncate view needs the encoder layer count")
        view = layer_truncate_spec(example, spec.k_layers, n_layers)
    else:  # REP_ZERO: tokens pass through, the mask is drawn at encode time
        view = BiasedView(example.example_id, spec, [list(c) for c in example.constituents])
        return view
    view.spec = spec
    return view
