"""End-to-end training, evaluation, and the ablation/pairwise harnesses.

One train step: encode the intact batch, run every configured bias branch
(explicit branches re-encode perturbed tokens, layer truncation reuses the
intact pass's prefix, representation zeroing corrupts the intact pooled rep),
then fuse. Contrastive mode optimizes intact CE + lambda * grouped contrastive
loss over softmaxed predictions plus the uniform dummy; PoE/focal modes feed
the branch logits into those objectives instead.

Evaluation uses only the intact head (branch heads are train-time machinery);
the undecidedness diagnostic routes perturbed views through their branch head
when the model has one, else through the intact head, so vanilla and debiased
models are measured on identical views.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen import DatasetBundle, Example
from .encoder import INTACT_BRANCH, EncoderConfig, FairFlowModel, join_constituents
from .objectives import (
    DebiasConfig,
    build_groups,
    build_z_matrix,
    contrastive_debias_loss,
    cross_entropy,
    focal_loss,
    poe_loss,
)
from .optim import AdamWConfig, AdamWState, LinearDecay, adamw_step
from .perturb import Kind, PerturbationSpec, derive_seed, make_view, parse_branch_specs, rep_zero_batch

DEFAULT_BRANCHES = (
    "shuffle",
    "drop_constituent:1",
    "drop_constituent:2",
    "fractional_drop:0.5",
    "layer_truncate:2",
    "rep_zero:0.9",
)

EVAL_EPOCH = -1  # epoch slot reserved for evaluation-time view seeds


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    branches: tuple[str, ...] = DEFAULT_BRANCHES
    debias: DebiasConfig = field(default_factory=DebiasConfig)
    eval_every: int = 0  # steps between val evaluations; 0 = end of each epoch
    dtype: str = "float64"
    freeze_perturbations: bool = False
    early_stop: bool = True
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.batch_size < 2:
            raise TrainingError("batch_size must be >= 2")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise TrainingError("dtype must be float32 or float64")
        if not 0.0 <= self.val_fraction < 0.5:
            raise TrainingError("val_fraction must be in [0, 0.5)")
        self.branches = tuple(self.branches)
        parse_branch_specs(self.branches)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "branches": list(self.branches),
            "eval_every": self.eval_every,
            "dtype": self.dtype,
            "freeze_perturbations": self.freeze_perturbations,
            "early_stop": self.early_stop,
            "val_fraction": self.val_fraction,
        }


@dataclass
class MetricsRecord:
    split: str
    accuracy: float
    macro_f1: float
    tv_uniform: float
    loss_ce: float
    loss_debias: float
    step: int
    wall_clock: float

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "tv_uniform": self.tv_uniform,
            "loss_ce": self.loss_ce,
            "loss_debias": self.loss_debias,
            "step": self.step,
            "wall_clock": self.wall_clock,
        }

    def to_cli_dict(self) -> dict:
        return {
            "split": self.split,
            "accuracy": self.accuracy,
            "f1": self.macro_f1,
            "tv_uniform": self.tv_uniform,
        }


@dataclass
class StepStats:
    total: float
    ce: float
    debias: float
    tv_uniform: float
    contrastive_batch: int


@dataclass
class TrainResult:
    model: FairFlowModel
    final_metrics: dict[str, MetricsRecord]
    history: list[dict]
    epoch_tv: list[float]
    best_val_accuracy: float


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all configured classes (0 when undefined)."""
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def tv_to_uniform(probs: np.ndarray) -> np.ndarray:
    u = 1.0 / probs.shape[-1]
    return 0.5 * np.abs(probs - u).sum(axis=-1)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


class Trainer:
    def __init__(
        self,
        encoder_config: EncoderConfig,
        train_config: TrainConfig,
        bundle: DatasetBundle,
        out_dir: str | Path | None = None,
        lambda_schedule=None,
    ):
        self.encoder_config = encoder_config
        self.cfg = train_config
        self.bundle = bundle
        self.out_dir = Path(out_dir) if out_dir else None
        self.lambda_schedule = lambda_schedule  # optional fn(step) -> lambda
        self.specs = parse_branch_specs(train_config.branches)
        dtype = np.float32 if train_config.dtype == "float32" else np.float64
        self.model = FairFlowModel(
            encoder_config,
            branch_keys=[s.key() for s in self.specs],
            seed=train_config.seed,
            dtype=dtype,
        )
        for s in self.specs:
            if s.kind is Kind.LAYER_TRUNCATE and s.k_layers > encoder_config.n_layers:
                raise TrainingError(
                    f"layer_truncate:{s.k_layers} exceeds the {encoder_config.n_layers}-layer encoder"
                )
        self._split_train_val()
        self.opt_state = AdamWState()
        self.opt_cfg = AdamWConfig(lr=train_config.lr, weight_decay=train_config.weight_decay)
        steps_per_epoch = max(1, -(-len(self.train_examples) // train_config.batch_size))
        self.schedule = LinearDecay(train_config.lr, steps_per_epoch * train_config.epochs)
        self.step = 0
        self.history: list[dict] = []
        self.epoch_tv: list[float] = []
        self._start = time.time()
        self._events_fh = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._events_fh = (self.out_dir / "metrics.jsonl").open("w", encoding="utf-8")

    def _split_train_val(self) -> None:
        examples = list(self.bundle.train)
        n_val = int(len(examples) * self.cfg.val_fraction)
        if n_val and len(examples) - n_val >= self.cfg.batch_size:
            rng = np.random.default_rng([self.cfg.seed, 0x5A11])
            order = rng.permutation(len(examples))
            self.val_examples = [examples[i] for i in order[:n_val]]
            self.train_examples = [examples[i] for i in order[n_val:]]
        else:
            self.val_examples = []
            self.train_examples = examples

    # -- single step ---------------------------------------------------------

    def train_step(self, batch: list[Example], epoch: int) -> StepStats:
        cfg = self.model.config
        debias_cfg = self.cfg.debias
        labels = np.array([ex.label for ex in batch])
        epoch_slot = 0 if self.cfg.freeze_perturbations else epoch

        def seeds_for(spec: PerturbationSpec) -> list[int]:
            return [
                derive_seed(self.cfg.seed, epoch_slot, spec.seed_stream, ex.example_id or 0)
                for ex in batch
            ]

        pooled, reps = branch_representations(self.model, batch, self.specs, seeds_for)
        z_intact = self.model.head_forward(INTACT_BRANCH, pooled)
        branch_logits = [self.model.head_forward(s.key(), reps[s.key()]) for s in self.specs]

        ce = cross_entropy(z_intact, labels)
        debias = None
        contrastive_batch = 0
        lam = self.cfg.debias.lambda_weight
        if self.lambda_schedule is not None:
            lam = float(self.lambda_schedule(self.step))
        if branch_logits and debias_cfg.fusion == "contrastive" and lam > 0:
            n_views = len(branch_logits) * len(batch)
            if debias_cfg.per_branch_groups:
                n_br = len(branch_logits)
                groups = build_groups(labels, n_views, per_branch=True, n_branches=n_br)
                z = build_z_matrix(
                    z_intact, branch_logits, debias_cfg.normalize_z, include_dummy=False
                )
                dummies = T.constant(
                    np.full((n_br, cfg.n_classes), 1.0 / cfg.n_classes), dtype=z.dtype
                )
                z = T.concat_rows([z, dummies])
            else:
                groups = build_groups(labels, n_views)
                z = build_z_matrix(z_intact, branch_logits, debias_cfg.normalize_z)
            debias = contrastive_debias_loss(
                z, groups, debias_cfg.tau, dummy_as_anchor=debias_cfg.dummy_as_anchor
            )
            contrastive_batch = groups.size
            total = T.add(ce, T.scale(debias, lam))
        elif branch_logits and debias_cfg.fusion == "poe":
            total = poe_loss(z_intact, branch_logits, labels)
        elif branch_logits and debias_cfg.fusion == "focal":
            total = focal_loss(z_intact, branch_logits, labels, debias_cfg.gamma)
        else:
            total = ce

        if not np.isfinite(total.data):
            raise TrainingError(
                f"non-finite loss at step {self.step}: "
                f"ce={float(ce.data):.4g} debias={float(debias.data) if debias is not None else 0:.4g}"
            )
        T.backward(total)
        adamw_step(self.model.params, self.opt_state, self.opt_cfg, lr=self.schedule.lr(self.step))
        self.model.zero_grads()
        self.step += 1

        tv = 0.0
        if branch_logits:
            probs = np.concatenate([_softmax_np(b.data) for b in branch_logits])
            tv = float(tv_to_uniform(probs).mean())
        return StepStats(
            total=float(total.data),
            ce=float(ce.data),
            debias=float(debias.data) if debias is not None else 0.0,
            tv_uniform=tv,
            contrastive_batch=contrastive_batch,
        )

    # -- loop ----------------------------------------------------------------

    def train(self) -> TrainResult:
        cfg = self.cfg
        self.model.training = True
        order_rng = np.random.default_rng([cfg.seed, 0x0DDE])
        best_val = -1.0
        best_params: dict[str, np.ndarray] | None = None
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(self.train_examples))
            tv_sum, tv_batches = 0.0, 0
            for batch_idx in _batches(order, cfg.batch_size):
                batch = [self.train_examples[i] for i in batch_idx]
                stats = self.train_step(batch, epoch)
                tv_sum += stats.tv_uniform
                tv_batches += 1
                if cfg.eval_every and self.step % cfg.eval_every == 0:
                    best_val, best_params = self._maybe_validate(stats, best_val, best_params)
            self.epoch_tv.append(tv_sum / max(tv_batches, 1))
            if not cfg.eval_every:
                best_val, best_params = self._maybe_validate(stats, best_val, best_params)
        if cfg.early_stop and best_params is not None:
            for k, arr in best_params.items():
                self.model.params[k].data[:] = arr
        self.model.training = False
        final = self.evaluate_all()
        if self.out_dir:
            self.model.save(self.out_dir / "final")
            self._write_final(final)
        if self._events_fh:
            self._events_fh.close()
            self._events_fh = None
        return TrainResult(
            model=self.model,
            final_metrics=final,
            history=self.history,
            epoch_tv=self.epoch_tv,
            best_val_accuracy=best_val,
        )

    def _maybe_validate(self, stats: StepStats, best_val: float, best_params):
        if not self.val_examples:
            return best_val, best_params
        record = evaluate(
            self.model,
            self.val_examples,
            "val",
            branch_specs=self.specs,
            eval_seed=self.cfg.seed,
            step=self.step,
            wall_clock=time.time() - self._start,
            losses=(stats.ce, stats.debias),
        )
        self._emit(record)
        if record.accuracy > best_val:
            best_val = record.accuracy
            best_params = {k: p.data.copy() for k, p in self.model.params.items()}
        return best_val, best_params

    def _emit(self, record: MetricsRecord) -> None:
        self.history.append(record.to_dict())
        if self._events_fh:
            self._events_fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            self._events_fh.flush()

    def evaluate_all(self) -> dict[str, MetricsRecord]:
        out = {}
        for name, examples in self.bundle.splits():
            if name == "train":
                continue
            record = evaluate(
                self.model,
                examples,
                name,
                branch_specs=self.specs,
                eval_seed=self.cfg.seed,
                step=self.step,
                wall_clock=time.time() - self._start,
            )
            self._emit(record)
            out[name] = record
        return out

    def _write_final(self, final: dict[str, MetricsRecord]) -> None:
        rows = ["split,accuracy,macro_f1,tv_uniform,loss_ce,loss_debias"]
        for name, rec in final.items():
            rows.append(
                f"{name},{rec.accuracy:.6f},{rec.macro_f1:.6f},{rec.tv_uniform:.6f},"
                f"{rec.loss_ce:.6f},{rec.loss_debias:.6f}"
            )
        (self.out_dir / "final_metrics.csv").write_text("\n".join(rows) + "\n")


def branch_representations(
    model: FairFlowModel,
    examples: list[Example],
    specs: list[PerturbationSpec],
    seeds_for,
) -> tuple[T.Tensor, dict[str, T.Tensor]]:
    """Pooled reps for the intact batch and every branch, from one packed encode.

    All token views (intact plus each explicit branch) are concatenated into a
    single padded batch so the encoder runs once; layer-truncate branches read
    the intact lanes of the requested prefix layer and rep-zero corrupts the
    intact pooled rows. ``seeds_for(spec)`` supplies one seed per example.
    """
    cfg = model.config
    b = len(examples)
    packed = [join_constituents(ex.constituents, cfg.sep_id) for ex in examples]
    explicit_order: list[str] = []
    for spec in specs:
        if spec.is_explicit:
            views = [
                make_view(ex, spec, seed, n_layers=cfg.n_layers)
                for ex, seed in zip(examples, seeds_for(spec))
            ]
            packed.extend(join_constituents(v.constituents, cfg.sep_id) for v in views)
            explicit_order.append(spec.key())
    collect = tuple(sorted({s.k_layers for s in specs if s.kind is Kind.LAYER_TRUNCATE}))
    pooled_all, collected = model.encode_batch(packed, collect_layers=collect)
    intact = T.slice_rows(pooled_all, 0, b) if len(packed) > b else pooled_all
    reps: dict[str, T.Tensor] = {}
    for lane, key in enumerate(explicit_order, start=1):
        reps[key] = T.slice_rows(pooled_all, lane * b, (lane + 1) * b)
    for spec in specs:
        if spec.kind is Kind.LAYER_TRUNCATE:
            reps[spec.key()] = T.slice_rows(collected[spec.k_layers], 0, b)
        elif spec.kind is Kind.REP_ZERO:
            reps[spec.key()] = rep_zero_batch(intact, spec.m_fraction, seeds_for(spec))
    return intact, reps


def predict_labels(model: FairFlowModel, examples: list[Example], batch_size: int = 256) -> np.ndarray:
    """Intact-head argmax predictions (the deployment path)."""
    preds = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            logits = model.intact_logits_batch(chunk)
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def perturbed_view_tv(
    model: FairFlowModel,
    examples: list[Example],
    specs: list[PerturbationSpec],
    eval_seed: int,
    batch_size: int = 256,
) -> float:
    """Mean TV-to-uniform of perturbed-view predictions over branches.

    Views are derived from ``eval_seed`` only, so two models with the same
    seed are measured on identical views. A view goes through the model's
    branch head when it has one, else through the intact head (the vanilla
    baseline case).
    """
    if not specs or not examples:
        return 0.0
    tvs = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]

            def seeds_for(spec: PerturbationSpec) -> list[int]:
                return [
                    derive_seed(eval_seed, EVAL_EPOCH, spec.seed_stream, ex.example_id or 0)
                    for ex in chunk
                ]

            _, reps = branch_representations(model, chunk, specs, seeds_for)
            for spec in specs:
                head = spec.key() if model.has_head(spec.key()) else INTACT_BRANCH
                logits = model.head_forward(head, reps[spec.key()])
                tvs.append(tv_to_uniform(_softmax_np(logits.data)))
    return float(np.concatenate(tvs).mean())


def evaluate(
    model: FairFlowModel,
    examples: list[Example],
    split: str,
    branch_specs: list[PerturbationSpec] | None = None,
    eval_seed: int = 0,
    step: int = 0,
    wall_clock: float | None = None,
    losses: tuple[float, float] | None = None,
    batch_size: int = 256,
) -> MetricsRecord:
    """Intact-head metrics on a split plus the undecidedness diagnostic."""
    if not examples:
        raise TrainingError(f"cannot evaluate empty split '{split}'")
    t0 = time.time()
    y_true = np.array([ex.label for ex in examples])
    y_pred = predict_labels(model, examples, batch_size=batch_size)
    acc = float((y_true == y_pred).mean())
    f1 = macro_f1(y_true, y_pred, model.config.n_classes)
    if losses is None:
        with T.no_grad():
            ce_vals = []
            for start in range(0, len(examples), batch_size):
                chunk = examples[start : start + batch_size]
                logits = model.intact_logits_batch(chunk)
                labels = np.array([ex.label for ex in chunk])
                ce_vals.append(cross_entropy(logits, labels).item() * len(chunk))
            loss_ce = float(np.sum(ce_vals) / len(examples))
        loss_debias = 0.0
    else:
        loss_ce, loss_debias = losses
    tv = perturbed_view_tv(model, examples, branch_specs or [], eval_seed, batch_size=batch_size)
    return MetricsRecord(
        split=split,
        accuracy=acc,
        macro_f1=f1,
        tv_uniform=tv,
        loss_ce=loss_ce,
        loss_debias=loss_debias,
        step=step,
        wall_clock=time.time() - t0 if wall_clock is None else wall_clock,
    )


def train(
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    bundle: DatasetBundle,
    out_dir: str | Path | None = None,
    lambda_schedule=None,
) -> TrainResult:
    return Trainer(encoder_config, train_config, bundle, out_dir, lambda_schedule).train()


# ---------------------------------------------------------------------------
# Ablation and pairwise harnesses.
# ---------------------------------------------------------------------------

EVAL_SPLITS = ("id_test", "stress_test", "ood_test", "transfer_test")


@dataclass
class HarnessReport:
    """Rows of per-configuration metrics, medians over seeds, per split."""

    rows: list[dict]
    per_run: list[dict]

    def to_csv(self, path) -> None:
        cols = ["config"] + [f"{s}" for s in EVAL_SPLITS]
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(
                ",".join([row["config"]] + [f"{row[s]:.6f}" for s in EVAL_SPLITS])
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def row(self, config_name: str) -> dict:
        for row in self.rows:
            if row["config"] == config_name:
                return row
        raise KeyError(config_name)


def _run_configs(
    encoder_config: EncoderConfig,
    base: TrainConfig,
    bundle: DatasetBundle,
    configs: list[tuple[str, tuple[str, ...], DebiasConfig | None]],
    seeds: list[int],
    out_dir: str | Path | None = None,
    quiet: bool = True,
) -> HarnessReport:
    rows = []
    per_run = []
    for name, branches, debias in configs:
        split_accs: dict[str, list[float]] = {s: [] for s in EVAL_SPLITS}
        for seed in seeds:
            cfg = replace(
                base,
                branches=branches,
                seed=seed,
                debias=debias if debias is not None else base.debias,
            )
            result = train(encoder_config, cfg, bundle)
            run_record = {"config": name, "seed": seed}
            for s in EVAL_SPLITS:
                acc = result.final_metrics[s].accuracy
                split_accs[s].append(acc)
                run_record[s] = acc
                run_record[f"{s}_f1"] = result.final_metrics[s].macro_f1
                run_record[f"{s}_tv"] = result.final_metrics[s].tv_uniform
            per_run.append(run_record)
            if not quiet:
                print(json.dumps(run_record, sort_keys=True))
        row = {"config": name}
        for s in EVAL_SPLITS:
            row[s] = float(np.median(split_accs[s]))
        rows.append(row)
    report = HarnessReport(rows=rows, per_run=per_run)
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "runs.jsonl").open("w") as fh:
            for rec in per_run:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return report


def run_ablation(
    encoder_config: EncoderConfig,
    base: TrainConfig,
    bundle: DatasetBundle,
    seeds: list[int] | None = None,
    out_dir: str | Path | None = None,
    quiet: bool = True,
) -> HarnessReport:
    """Vanilla, add-one-branch, full, and remove-one-branch rows, shared seeds."""
    branches = list(base.branches)
    if not branches:
        raise TrainingError("ablation needs a configured full branch set")
    seeds = seeds if seeds is not None else [base.seed + i for i in range(3)]
    configs: list[tuple[str, tuple[str, ...], DebiasConfig | None]] = [("vanilla", (), None)]
    for b in branches:
        configs.append((f"+{b}", (b,), None))
    configs.append(("full", tuple(branches), None))
    for b in branches:
        kept = tuple(x for x in branches if x != b)
        configs.append((f"-{b}", kept, None))
    report = _run_configs(encoder_config, base, bundle, configs, seeds, out_dir, quiet)
    if out_dir:
        report.to_csv(Path(out_dir) / "ablation.csv")
    return report


def run_pairwise(
    encoder_config: EncoderConfig,
    base: TrainConfig,
    bundle: DatasetBundle,
    seeds: list[int] | None = None,
    out_dir: str | Path | None = None,
    quiet: bool = True,
) -> dict:
    """One run per (explicit, implicit) branch pair; stress/OOD deltas vs vanilla."""
    specs = parse_branch_specs(base.branches)
    explicit = [s.key() for s in specs if s.is_explicit]
    implicit = [s.key() for s in specs if not s.is_explicit]
    if not explicit or not implicit:
        raise TrainingError("pairwise needs at least one explicit and one implicit branch")
    seeds = seeds if seeds is not None else [base.seed + i for i in range(3)]
    configs: list[tuple[str, tuple[str, ...], DebiasConfig | None]] = [("vanilla", (), None)]
    for e in explicit:
        for i in implicit:
            configs.append((f"{e}|{i}", (e, i), None))
    report = _run_configs(encoder_config, base, bundle, configs, seeds, out_dir, quiet)
    vanilla = report.row("vanilla")
    matrix = {
        split: {
            e: {i: report.row(f"{e}|{i}")[split] - vanilla[split] for i in implicit}
            for e in explicit
        }
        for split in ("stress_test", "ood_test")
    }
    if out_dir:
        out_dir = Path(out_dir)
        for split in matrix:
            lines = ["explicit," + ",".join(implicit)]
            for e in explicit:
                lines.append(e + "," + ",".join(f"{matrix[split][e][i]:+.6f}" for i in implicit))
            (out_dir / f"pairwise_{split}.csv").write_text("\n".join(lines) + "\n")
    return {"vanilla": vanilla, "deltas": matrix, "report": report}
