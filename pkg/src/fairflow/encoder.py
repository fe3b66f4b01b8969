"""Tiny transformer encoder, intact classification head, and per-branch heads.

One shared encoder feeds every branch. A branch head is two linear layers with
a ReLU in between (hidden width = d_model); each branch owns exactly one head
and the intact input has its own. Pooling is a pad-masked mean over token
positions of the last (possibly truncated) layer, so encoding with
``k_layers=k`` reproduces the first k layers of the full forward pass
bit-exactly.

Constituents are joined with a single separator id before encoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen import PAD_ID, SEP_ID
from .perturb import PerturbationSpec, parse_branch_specs


class EncoderError(Exception):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int = 120
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 2
    d_ff: int = 64
    max_len: int = 64
    n_classes: int = 3
    dropout: float = 0.0
    pad_id: int = PAD_ID
    sep_id: int = SEP_ID

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise EncoderError("d_model must be divisible by n_heads")
        if self.n_layers < 1:
            raise EncoderError("need at least one layer")
        if self.n_classes < 2:
            raise EncoderError("need at least two classes")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "n_classes": self.n_classes,
            "dropout": self.dropout,
            "pad_id": self.pad_id,
            "sep_id": self.sep_id,
        }


INTACT_BRANCH = "intact"

# Hidden width of every branch head equals d_model, so each head adds
# (d*d + d) + (d*C + C) parameters on top of the shared encoder.
def head_param_count(d_model: int, n_classes: int) -> int:
    h = d_model
    return (d_model * h + h) + (h * n_classes + n_classes)


def join_constituents(constituents, sep_id: int = SEP_ID) -> list[int]:
    """Concatenate constituents with a single separator between them."""
    out: list[int] = []
    for i, c in enumerate(constituents):
        if i:
            out.append(sep_id)
        out.extend(c)
    return out


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class FairFlowModel:
    """Shared encoder plus the intact head and one head per bias branch."""

    def __init__(
        self,
        config: EncoderConfig,
        branch_keys: list[str] | None = None,
        seed: int = 0,
        dtype=np.float64,
    ):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.params: dict[str, T.Tensor] = {}
        rng = np.random.default_rng([int(seed), 0xE0C0])
        d, dff, v = config.d_model, config.d_ff, config.vocab_size

        self._add("tok_emb", rng.normal(0.0, 0.1, size=(v, d)))
        self._add("pos_emb", rng.normal(0.0, 0.1, size=(config.max_len, d)))
        for layer in range(config.n_layers):
            p = f"layer{layer}."
            self._add(p + "ln1_g", np.ones(d))
            self._add(p + "ln1_b", np.zeros(d))
            for name in ("wq", "wk", "wv", "wo"):
                self._add(p + name, _xavier(rng, d, d, self.dtype))
                self._add(p + "b" + name[1], np.zeros(d))
            self._add(p + "ln2_g", np.ones(d))
            self._add(p + "ln2_b", np.zeros(d))
            self._add(p + "w1", _xavier(rng, d, dff, self.dtype))
            self._add(p + "b1", np.zeros(dff))
            self._add(p + "w2", _xavier(rng, dff, d, self.dtype))
            self._add(p + "b2", np.zeros(d))

        self.branch_keys = list(branch_keys or [])
        for key in [INTACT_BRANCH] + self.branch_keys:
            self._add_head(key, rng)
        self.training = False

    # -- parameters --------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = T.parameter(np.asarray(value, dtype=self.dtype))

    def _add_head(self, key: str, rng: np.random.Generator) -> None:
        if f"head.{key}.w1" in self.params:
            raise EncoderError(f"duplicate branch head '{key}'")
        d, c = self.config.d_model, self.config.n_classes
        self._add(f"head.{key}.w1", _xavier(rng, d, d, self.dtype))
        self._add(f"head.{key}.b1", np.zeros(d))
        self._add(f"head.{key}.w2", _xavier(rng, d, c, self.dtype))
        self._add(f"head.{key}.b2", np.zeros(c))

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def head_keys(self) -> list[str]:
        return [INTACT_BRANCH] + list(self.branch_keys)

    def has_head(self, key: str) -> bool:
        return f"head.{key}.w1" in self.params

    def drop_branch_heads(self) -> None:
        """Delete every branch head (the deployment model keeps only intact)."""
        for key in list(self.branch_keys):
            for part in ("w1", "b1", "w2", "b2"):
                del self.params[f"head.{key}.{part}"]
        self.branch_keys = []

    # -- forward -----------------------------------------------------------

    def _validate_tokens(self, seqs: list[list[int]]) -> None:
        cfg = self.config
        for s in seqs:
            if len(s) == 0:
                raise EncoderError("cannot encode an empty token sequence")
            if len(s) > cfg.max_len:
                raise EncoderError(f"sequence of {len(s)} tokens exceeds max_len={cfg.max_len}")
            for t in s:
                if not 0 <= t < cfg.vocab_size:
                    raise EncoderError(f"token id {t} outside vocab of {cfg.vocab_size}")

    def encode_batch(
        self,
        seqs: list[list[int]],
        k_layers: int | None = None,
        collect_layers: tuple[int, ...] = (),
        rng: np.random.Generator | None = None,
    ) -> tuple[T.Tensor, dict[int, T.Tensor]]:
        """Encode padded sequences; returns pooled reps ``(B, d)``.

        ``k_layers`` stops after that many layers; ``collect_layers`` also
        returns the pooled rep after each listed layer (from the same pass, so
        a collected layer k equals a ``k_layers=k`` encode bit-exactly).
        """
        cfg = self.config
        self._validate_tokens(seqs)
        k = cfg.n_layers if k_layers is None else int(k_layers)
        if not 1 <= k <= cfg.n_layers:
            raise EncoderError(f"k_layers={k} outside [1, {cfg.n_layers}]")
        want = set(collect_layers)
        if any(not 1 <= w <= k for w in want):
            raise EncoderError("collect_layers must lie within the encoded prefix")

        b = len(seqs)
        t_max = max(len(s) for s in seqs)
        ids = np.full((b, t_max), cfg.pad_id, dtype=np.int64)
        mask = np.zeros((b, t_max), dtype=self.dtype)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = 1.0

        # Constant helpers: additive key mask and mean-pool weights.
        neg = np.where(mask[:, None, :] > 0, 0.0, -1e9).astype(self.dtype)
        attn_bias = np.broadcast_to(neg, (b, t_max, t_max))
        lengths = mask.sum(axis=1, keepdims=True)
        pool_w = np.repeat((mask / lengths)[:, :, None], cfg.d_model, axis=2)

        pos_rows = T.embedding_lookup(self.params["pos_emb"], np.arange(t_max, dtype=np.int64))
        x = T.add_seq(T.embedding_lookup(self.params["tok_emb"], ids), pos_rows)
        x = self._maybe_dropout(x, rng)

        collected: dict[int, T.Tensor] = {}
        dh = cfg.d_model // cfg.n_heads
        inv_sqrt_dh = 1.0 / np.sqrt(dh)
        for layer in range(k):
            p = f"layer{layer}."
            h = T.add_bias(
                T.mul_bias(T.layernorm(x), self.params[p + "ln1_g"]), self.params[p + "ln1_b"]
            )
            q = T.add_bias(T.matmul(h, self.params[p + "wq"]), self.params[p + "bq"])
            key = T.add_bias(T.matmul(h, self.params[p + "wk"]), self.params[p + "bk"])
            val = T.add_bias(T.matmul(h, self.params[p + "wv"]), self.params[p + "bv"])
            ctxs = []
            for head in range(cfg.n_heads):
                lo, hi = head * dh, (head + 1) * dh
                qh = T.slice_last(q, lo, hi)
                kh = T.slice_last(key, lo, hi)
                vh = T.slice_last(val, lo, hi)
                scores = T.scale(T.matmul(qh, T.transpose_last2(kh)), inv_sqrt_dh)
                scores = T.add(scores, T.constant(attn_bias, dtype=self.dtype))
                ctxs.append(T.matmul(T.softmax(scores, axis=-1), vh))
            attn = T.add_bias(
                T.matmul(T.concat_last(ctxs), self.params[p + "wo"]), self.params[p + "bo"]
            )
            x = T.add(x, self._maybe_dropout(attn, rng))

            f = T.add_bias(
                T.mul_bias(T.layernorm(x), self.params[p + "ln2_g"]), self.params[p + "ln2_b"]
            )
            f = T.relu(T.add_bias(T.matmul(f, self.params[p + "w1"]), self.params[p + "b1"]))
            f = T.add_bias(T.matmul(f, self.params[p + "w2"]), self.params[p + "b2"])
            x = T.add(x, self._maybe_dropout(f, rng))

            if (layer + 1) in want or (layer + 1) == k:
                pooled = T.sum(T.mask_apply(x, pool_w), axis=1)
                if (layer + 1) in want:
                    collected[layer + 1] = pooled
        return pooled, collected

    def _maybe_dropout(self, x: T.Tensor, rng: np.random.Generator | None) -> T.Tensor:
        p = self.config.dropout
        if p <= 0.0 or not self.training:
            return x
        if rng is None:
            raise EncoderError("dropout > 0 requires an rng during training")
        keep = (rng.random(x.shape) >= p).astype(self.dtype) / (1.0 - p)
        return T.mask_apply(x, keep)

    def encode(self, tokens, k_layers: int | None = None) -> T.Tensor:
        """Encode a single token sequence to a pooled ``(d,)`` representation."""
        pooled, _ = self.encode_batch([list(tokens)], k_layers=k_layers)
        return T.reshape(pooled, (self.config.d_model,))

    def head_forward(self, branch: str, rep: T.Tensor) -> T.Tensor:
        """Two-layer ReLU head of one branch over ``(d,)`` or ``(B, d)`` reps."""
        if not self.has_head(branch):
            raise EncoderError(f"no head for branch '{branch}'")
        single = rep.ndim == 1
        if single:
            rep = T.reshape(rep, (1, rep.shape[0]))
        h = T.relu(
            T.add_bias(T.matmul(rep, self.params[f"head.{branch}.w1"]), self.params[f"head.{branch}.b1"])
        )
        out = T.add_bias(
            T.matmul(h, self.params[f"head.{branch}.w2"]), self.params[f"head.{branch}.b2"]
        )
        return T.reshape(out, (self.config.n_classes,)) if single else out

    def intact_logits_batch(self, examples) -> T.Tensor:
        seqs = [join_constituents(ex.constituents, self.config.sep_id) for ex in examples]
        pooled, _ = self.encode_batch(seqs)
        return self.head_forward(INTACT_BRANCH, pooled)

    def intact_predict(self, example) -> T.Tensor:
        """Full-depth encode of the joined constituents through the intact head."""
        tokens = join_constituents(example.constituents, self.config.sep_id)
        return self.head_forward(INTACT_BRANCH, self.encode(tokens))

    # -- persistence ---------------------------------------------------------

    def save(self, out_dir) -> None:
        """Checkpoint = ``params.npz`` (one array per parameter) + ``meta.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez(out_dir / "params.npz", **{k: p.data for k, p in self.params.items()})
        meta = {
            "format_version": 1,
            "encoder": self.config.to_dict(),
            "branch_keys": self.branch_keys,
            "dtype": self.dtype.name,
            "seed": self.seed,
        }
        (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, in_dir) -> "FairFlowModel":
        in_dir = Path(in_dir)
        meta_path = in_dir / "meta.json"
        if not meta_path.exists():
            raise EncoderError(f"no checkpoint at {in_dir}")
        meta = json.loads(meta_path.read_text())
        config = EncoderConfig(**meta["encoder"])
        model = cls(
            config,
            branch_keys=meta["branch_keys"],
            seed=meta.get("seed", 0),
            dtype=np.dtype(meta["dtype"]),
        )
        with np.load(in_dir / "params.npz") as arrays:
            names = set(arrays.files)
            if names != set(model.params):
                raise EncoderError("checkpoint parameters do not match the model layout")
            for k in names:
                model.params[k] = T.parameter(arrays[k].astype(model.dtype))
        return model

    def branch_specs(self) -> list[PerturbationSpec]:
        return parse_branch_specs(self.branch_keys)
