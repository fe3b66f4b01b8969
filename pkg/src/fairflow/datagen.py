"""Synthetic shortcut-injection dataset generator.

The task is a three-class NLI analog over integer tokens. Ground truth is a
set-level rule over *content* tokens (never over the injected shortcut):

- contradict: the hypothesis contains the antonym partner of a premise token;
- entail: otherwise, all hypothesis content tokens appear in the premise;
- neutral: otherwise.

Checks run in that order. The antonym pairing is fixed: content ids start at
``FIRST_CONTENT_ID`` and consecutive ids form a pair, so the partner of token
``t`` flips the low bit of ``t - FIRST_CONTENT_ID``.

The shortcut is a single ``NEG`` token inserted into hypotheses. In the train
and in-domain test splits it co-occurs with the contradict label with
probability ``shortcut_strength``; in the stress split it appears only on
non-contradict examples, so any model leaning on it gets punished. The OOD
split pairs every label with >= 0.8 lexical overlap (breaking the
overlap-implies-entail heuristic), and the transfer split uses a disjoint
region of the vocabulary with longer sequences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
SEP_ID = 1
NEG_ID = 2
FIRST_CONTENT_ID = 3

ENTAIL, CONTRADICT, NEUTRAL = 0, 1, 2
NOT_ENTAIL = 1  # binary mode: 0 = entail, 1 = not-entail
LABEL_NAMES = ("entail", "contradict", "neutral")

SPLIT_NAMES = ("train", "id_test", "stress_test", "ood_test", "transfer_test")

AUGMENT_OPS = ("drop_premise", "drop_hypothesis", "shuffle", "fractional_drop")


class DatagenError(Exception):
    pass


class BundleFormatError(DatagenError):
    pass


@dataclass
class ExampleMeta:
    has_shortcut_token: bool
    shortcut_aligned: bool
    overlap_ratio: float

    def to_dict(self) -> dict:
        return {
            "has_shortcut_token": self.has_shortcut_token,
            "shortcut_aligned": self.shortcut_aligned,
            "overlap_ratio": self.overlap_ratio,
        }


@dataclass
class Example:
    constituents: list[list[int]]
    label: int
    meta: ExampleMeta
    example_id: int | None = field(default=None, compare=False)

    @property
    def premise(self) -> list[int]:
        return self.constituents[0]

    @property
    def hypothesis(self) -> list[int]:
        return self.constituents[1]

    def key(self) -> tuple:
        return (tuple(tuple(c) for c in self.constituents), self.label)


@dataclass
class GeneratorConfig:
    vocab_size: int = 120
    n_train: int = 20000
    n_id: int = 2000
    n_stress: int = 2000
    n_ood: int = 2000
    n_transfer: int = 2000
    shortcut_strength: float = 0.9
    seed: int = 0
    class_priors: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    n_classes: int = 3
    min_len: int = 4
    max_len: int = 12
    transfer_len_shift: int = 2
    ood_overlap_threshold: float = 0.8

    def __post_init__(self):
        if not 0.5 < self.shortcut_strength <= 1.0:
            raise DatagenError("shortcut_strength must be in (0.5, 1]")
        for name in ("n_train", "n_id", "n_stress", "n_ood", "n_transfer"):
            if getattr(self, name) < 1:
                raise DatagenError(f"{name} must be >= 1")
        if self.n_classes not in (2, 3):
            raise DatagenError("n_classes must be 2 or 3")
        self.class_priors = tuple(float(p) for p in self.class_priors)
        if len(self.class_priors) != self.n_classes or abs(sum(self.class_priors) - 1.0) > 1e-9:
            raise DatagenError("class_priors must have one entry per class and sum to 1")
        if not 2 <= self.min_len <= self.max_len:
            raise DatagenError("need 2 <= min_len <= max_len")
        if not 0.0 < self.ood_overlap_threshold < 1.0:
            raise DatagenError("ood_overlap_threshold must be in (0, 1)")
        n_pairs = (self.vocab_size - FIRST_CONTENT_ID) // 2
        region = n_pairs // 2
        if region < self.max_len + self.transfer_len_shift + 2:
            raise DatagenError(
                "vocab too small for antonym pairing: "
                f"{region} pairs per region, need {self.max_len + self.transfer_len_shift + 2}"
            )

    @property
    def n_pairs(self) -> int:
        return (self.vocab_size - FIRST_CONTENT_ID) // 2

    def region_pairs(self, transfer: bool) -> np.ndarray:
        half = self.n_pairs // 2
        return np.arange(half, self.n_pairs) if transfer else np.arange(half)


@dataclass
class DatasetBundle:
    train: list[Example]
    id_test: list[Example]
    stress_test: list[Example]
    ood_test: list[Example]
    transfer_test: list[Example]

    def split(self, name: str) -> list[Example]:
        if name not in SPLIT_NAMES:
            raise DatagenError(f"unknown split '{name}', expected one of {SPLIT_NAMES}")
        return getattr(self, name)

    def splits(self):
        return [(name, getattr(self, name)) for name in SPLIT_NAMES]


def antonym_partner(token: int) -> int:
    if token < FIRST_CONTENT_ID:
        raise DatagenError(f"token {token} is not a content token")
    offset = token - FIRST_CONTENT_ID
    return FIRST_CONTENT_ID + (offset ^ 1)


def pair_tokens(pair_index: int) -> tuple[int, int]:
    lo = FIRST_CONTENT_ID + 2 * pair_index
    return lo, lo + 1


def content_tokens(tokens) -> set[int]:
    return {t for t in tokens if t >= FIRST_CONTENT_ID}


def overlap_ratio(premise, hypothesis) -> float:
    """Fraction of distinct hypothesis content tokens that also occur in the premise."""
    hyp = content_tokens(hypothesis)
    if not hyp:
        return 0.0
    return len(hyp & content_tokens(premise)) / len(hyp)


def oracle_label(constituents, n_classes: int = 3) -> int:
    """Rule-based ground truth from content tokens alone."""
    prem = content_tokens(constituents[0])
    hyp = content_tokens(constituents[1])
    crossing = any(antonym_partner(t) in prem for t in hyp)
    if n_classes == 3:
        if crossing:
            return CONTRADICT
        if hyp and hyp <= prem:
            return ENTAIL
        return NEUTRAL
    if not crossing and hyp and hyp <= prem:
        return ENTAIL
    return NOT_ENTAIL


def _meta_for(constituents, label: int) -> ExampleMeta:
    has_neg = NEG_ID in constituents[1]
    return ExampleMeta(
        has_shortcut_token=has_neg,
        shortcut_aligned=has_neg and label == CONTRADICT,
        overlap_ratio=overlap_ratio(constituents[0], constituents[1]),
    )


def _finish(constituents, label: int, eid: int) -> Example:
    return Example(
        constituents=[list(map(int, c)) for c in constituents],
        label=int(label),
        meta=_meta_for(constituents, label),
        example_id=eid,
    )


class _Sampler:
    """Per-split example sampler over one vocabulary region."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, transfer: bool = False):
        self.cfg = cfg
        self.rng = rng
        self.pairs = cfg.region_pairs(transfer)
        shift = cfg.transfer_len_shift if transfer else 0
        self.min_len = cfg.min_len + shift
        self.max_len = cfg.max_len + shift

    def _premise(self, length: int) -> tuple[list[int], np.ndarray]:
        pair_ids = self.rng.choice(self.pairs, size=length, replace=False)
        members = self.rng.integers(0, 2, size=length)
        tokens = [FIRST_CONTENT_ID + 2 * int(q) + int(m) for q, m in zip(pair_ids, members)]
        return tokens, pair_ids

    def _fresh_pool(self, used_pairs: np.ndarray) -> list[int]:
        used = set(int(q) for q in used_pairs)
        free = [q for q in self.pairs if int(q) not in used]
        members = self.rng.integers(0, 2, size=len(free))
        return [FIRST_CONTENT_ID + 2 * int(q) + int(m) for q, m in zip(free, members)]

    def _mixed_rest(self, premise: list[int], fresh_pool: list[int], count: int) -> list[int]:
        if count == 0:
            return []
        n_prem = min(int(self.rng.binomial(count, 0.5)), len(premise))
        n_fresh = count - n_prem
        if n_fresh > len(fresh_pool):
            n_fresh = len(fresh_pool)
            n_prem = count - n_fresh
        rest = []
        if n_prem:
            rest += self.rng.choice(premise, size=n_prem, replace=False).tolist()
        if n_fresh:
            rest += self.rng.choice(fresh_pool, size=n_fresh, replace=False).tolist()
        return [int(t) for t in rest]

    def content_example(self, content_label: int) -> list[list[int]]:
        """Token pair for one of the three content styles (3-class labels)."""
        rng = self.rng
        len_p = int(rng.integers(self.min_len, self.max_len + 1))
        premise, used = self._premise(len_p)
        if content_label == ENTAIL:
            len_h = int(rng.integers(self.min_len, len_p + 1))
            hyp = rng.choice(premise, size=len_h, replace=False).tolist()
            return [premise, [int(t) for t in hyp]]
        fresh_pool = self._fresh_pool(used)
        len_h = int(rng.integers(self.min_len, self.max_len + 1))
        if content_label == CONTRADICT:
            anchor = int(rng.choice(premise))
            special = antonym_partner(anchor)
        else:
            special = int(fresh_pool.pop(int(rng.integers(0, len(fresh_pool)))))
        rest = self._mixed_rest(premise, fresh_pool, len_h - 1)
        hyp = rest[:]
        hyp.insert(int(rng.integers(0, len(hyp) + 1)), special)
        return [premise, hyp]

    def ood_example(self, content_label: int) -> list[list[int]]:
        """High-overlap pair: a permuted premise subset, optionally one swap."""
        rng = self.rng
        thr = self.cfg.ood_overlap_threshold
        min_h = max(self.min_len, math.ceil(1.0 / (1.0 - thr)))
        if min_h > self.max_len:
            raise DatagenError("ood_overlap_threshold too strict for max_len")
        len_h = int(rng.integers(min_h, self.max_len + 1))
        len_p = int(rng.integers(max(len_h, self.min_len), self.max_len + 1))
        premise, used = self._premise(len_p)
        hyp = rng.choice(premise, size=len_h, replace=False).tolist()
        hyp = [int(t) for t in hyp]
        if content_label == CONTRADICT:
            anchor = int(rng.choice(premise))
            hyp[int(rng.integers(0, len_h))] = antonym_partner(anchor)
        elif content_label == NEUTRAL:
            fresh_pool = self._fresh_pool(used)
            fresh = int(fresh_pool[int(rng.integers(0, len(fresh_pool)))])
            hyp[int(rng.integers(0, len_h))] = fresh
        return [premise, hyp]


def _content_label_for(target_label: int, cfg: GeneratorConfig, rng: np.random.Generator) -> int:
    """Map a task label to a content construction style (3-class styles)."""
    if cfg.n_classes == 3:
        return target_label
    if target_label == ENTAIL:
        return ENTAIL
    return CONTRADICT if rng.random() < 0.5 else NEUTRAL


def _task_label(content_label: int, cfg: GeneratorConfig) -> int:
    if cfg.n_classes == 3:
        return content_label
    return ENTAIL if content_label == ENTAIL else NOT_ENTAIL


def _insert_neg(hyp: list[int], rng: np.random.Generator) -> list[int]:
    out = list(hyp)
    out.insert(int(rng.integers(0, len(out) + 1)), NEG_ID)
    return out


def _shortcut_label(cfg: GeneratorConfig) -> int:
    """The label the shortcut token is spuriously tied to."""
    return CONTRADICT if cfg.n_classes == 3 else NOT_ENTAIL


def generate(config: GeneratorConfig) -> DatasetBundle:
    """Generate all five splits; deterministic in ``config.seed``."""
    root = np.random.SeedSequence(config.seed)
    streams = root.spawn(len(SPLIT_NAMES))
    sizes = (config.n_train, config.n_id, config.n_stress, config.n_ood, config.n_transfer)
    shortcut_lbl = _shortcut_label(config)
    train_keys: set = set()
    splits: dict[str, list[Example]] = {}
    for name, stream, size in zip(SPLIT_NAMES, streams, sizes):
        rng = np.random.default_rng(stream)
        sampler = _Sampler(config, rng, transfer=(name == "transfer_test"))
        examples = []
        for eid in range(size):
            for _attempt in range(1000):
                label = int(rng.choice(config.n_classes, p=config.class_priors))
                content_label = _content_label_for(label, config, rng)
                if name == "ood_test":
                    cons = sampler.ood_example(content_label)
                else:
                    cons = sampler.content_example(content_label)
                if name in ("train", "id_test"):
                    if label == shortcut_lbl and rng.random() < config.shortcut_strength:
                        cons[1] = _insert_neg(cons[1], rng)
                elif name == "stress_test":
                    if label != shortcut_lbl and rng.random() < config.shortcut_strength:
                        cons[1] = _insert_neg(cons[1], rng)
                ex = _finish(cons, label, eid)
                if name == "train" or ex.key() not in train_keys:
                    break
            else:
                raise DatagenError(f"could not generate a fresh example for split {name}")
            if name == "train":
                train_keys.add(ex.key())
            examples.append(ex)
        splits[name] = examples
    bundle = DatasetBundle(**splits)
    validate_bundle(bundle, config)
    return bundle


# ---------------------------------------------------------------------------
# Validation.
# ---------------------------------------------------------------------------


def validate_example(ex: Example, vocab_size: int, n_classes: int = 3) -> None:
    """Check structural and meta-vs-content consistency of one example."""
    if len(ex.constituents) < 1:
        raise DatagenError("example needs at least one constituent")
    for c in ex.constituents:
        for t in c:
            if not 0 <= t < vocab_size:
                raise DatagenError(f"token {t} outside vocab of {vocab_size}")
    if not 0 <= ex.label < n_classes:
        raise DatagenError(f"label {ex.label} outside {n_classes} classes")
    if len(ex.constituents) >= 2:
        recomputed = _meta_for(ex.constituents, ex.label)
        if (
            recomputed.has_shortcut_token != ex.meta.has_shortcut_token
            or recomputed.shortcut_aligned != ex.meta.shortcut_aligned
            or abs(recomputed.overlap_ratio - ex.meta.overlap_ratio) > 1e-9
        ):
            raise DatagenError(f"meta inconsistent with content for example {ex.example_id}")


def validate_bundle(bundle: DatasetBundle, config: GeneratorConfig) -> None:
    shortcut_lbl = _shortcut_label(config)
    for name, examples in bundle.splits():
        for ex in examples:
            validate_example(ex, config.vocab_size, config.n_classes)
            if oracle_label(ex.constituents, config.n_classes) != ex.label:
                raise DatagenError(f"{name}: label disagrees with the content rule")
    for ex in bundle.stress_test:
        if ex.meta.has_shortcut_token and ex.label == shortcut_lbl:
            raise DatagenError("stress split contains an aligned shortcut example")
    labels = {ex.label for ex in bundle.ood_test}
    if labels == {ENTAIL}:
        raise DatagenError("ood split has no non-entail examples")
    for ex in bundle.ood_test:
        if ex.meta.overlap_ratio < config.ood_overlap_threshold - 1e-9:
            raise DatagenError("ood split contains a low-overlap example")


# ---------------------------------------------------------------------------
# Data augmentation with explicit perturbations.
# ---------------------------------------------------------------------------


def augment(train: list[Example], ops, not_entail_label: int, seed: int = 0) -> list[Example]:
    """Append one not-entail variant per example per op.

    Ops: ``drop_premise`` ('', h), ``drop_hypothesis`` (p, ''), ``shuffle``
    (both constituents reshuffled), ``fractional_drop`` (premise loses half
    its tokens, hypothesis is reshuffled).
    """
    from .perturb import _fisher_yates  # local: avoids a module cycle at import

    ops = list(ops)
    for op in ops:
        if op not in AUGMENT_OPS:
            raise DatagenError(f"unknown augmentation op '{op}', expected one of {AUGMENT_OPS}")
    if not_entail_label is None:
        raise DatagenError("augment needs a designated not-entail class id")
    out = [ex for ex in train]
    next_id = len(train)
    for op_idx, op in enumerate(ops):
        for ex_idx, ex in enumerate(train):
            if len(ex.constituents) != 2:
                raise DatagenError("augmentation requires premise-hypothesis examples")
            rng = np.random.default_rng(_aug_seed(seed, op_idx, ex_idx))
            prem, hyp = ex.constituents
            if op == "drop_premise":
                cons = [[], list(hyp)]
            elif op == "drop_hypothesis":
                cons = [list(prem), []]
            elif op == "shuffle":
                cons = [_fisher_yates(prem, rng), _fisher_yates(hyp, rng)]
            else:  # fractional_drop: drop half the premise, reshuffle the hypothesis
                n = len(prem)
                n_drop = min(n // 2, max(n - 1, 0))
                dropped = set(rng.choice(n, size=n_drop, replace=False).tolist()) if n_drop else set()
                kept = [t for i, t in enumerate(prem) if i not in dropped]
                cons = [kept, _fisher_yates(hyp, rng)]
            out.append(_finish(cons, not_entail_label, next_id))
            next_id += 1
    return out


def _aug_seed(seed: int, op_idx: int, ex_idx: int) -> int:
    from .perturb import derive_seed

    return derive_seed(seed, 0xA06, op_idx, ex_idx)


# ---------------------------------------------------------------------------
# JSONL persistence. One example per line:
#   {"c": [[ids...], [ids...]], "y": int, "meta": {...}}
# ---------------------------------------------------------------------------


def _example_to_json(ex: Example) -> str:
    payload = {"c": [list(map(int, c)) for c in ex.constituents], "y": int(ex.label), "meta": ex.meta.to_dict()}
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _example_from_json(line: str, lineno: int, path: str) -> Example:
    try:
        payload = json.loads(line)
        meta = payload["meta"]
        return Example(
            constituents=[list(map(int, c)) for c in payload["c"]],
            label=int(payload["y"]),
            meta=ExampleMeta(
                has_shortcut_token=bool(meta["has_shortcut_token"]),
                shortcut_aligned=bool(meta["shortcut_aligned"]),
                overlap_ratio=float(meta["overlap_ratio"]),
            ),
            example_id=lineno - 1,
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise BundleFormatError(f"{path}: line {lineno}: malformed example ({exc})") from exc


def save_examples(examples: list[Example], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(_example_to_json(ex) + "\n")


def load_examples(path) -> list[Example]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            out.append(_example_from_json(line, lineno, str(path)))
    return out


def save_bundle(bundle: DatasetBundle, out_dir, gen_config: GeneratorConfig | None = None) -> None:
    """Write one JSONL per split plus ``gen_meta.json`` provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, examples in bundle.splits():
        save_examples(examples, out_dir / f"{name}.jsonl")
    if gen_config is not None:
        meta = {"format_version": 1, "generator": _config_dict(gen_config)}
        (out_dir / "gen_meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )


def load_bundle(in_dir) -> DatasetBundle:
    in_dir = Path(in_dir)
    splits = {}
    for name in SPLIT_NAMES:
        path = in_dir / f"{name}.jsonl"
        if not path.exists():
            raise BundleFormatError(f"missing split file {path}")
        splits[name] = load_examples(path)
    return DatasetBundle(**splits)


def load_gen_meta(in_dir) -> dict:
    path = Path(in_dir) / "gen_meta.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _config_dict(cfg: GeneratorConfig) -> dict:
    return {
        "vocab_size": cfg.vocab_size,
        "n_train": cfg.n_train,
        "n_id": cfg.n_id,
        "n_stress": cfg.n_stress,
        "n_ood": cfg.n_ood,
        "n_transfer": cfg.n_transfer,
        "shortcut_strength": cfg.shortcut_strength,
        "seed": cfg.seed,
        "class_priors": list(cfg.class_priors),
        "n_classes": cfg.n_classes,
        "min_len": cfg.min_len,
        "max_len": cfg.max_len,
        "transfer_len_shift": cfg.transfer_len_shift,
        "ood_overlap_threshold": cfg.ood_overlap_threshold,
    }
