"""Contrastive tuning loop: epochs, validation-gated acceptance, idle-epoch
stopping, and best-checkpoint tracking.

An epoch is accepted only if both the validation loss and the validation
error count strictly decrease relative to the best accepted state so far.
The run stops after `idle_epochs_to_stop` consecutive non-improvements and
returns the checkpoint of the last accepted epoch (or the initial model if
none was accepted).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import TripletSample
from .encoder import (DualEncoder, PAD_ID, Vocab, copy_tree, encode_batch,
                      wrap_params)
from .freeze import FreezeSpec, parse_freeze_spec, trainable_names
from .optim import (LossSpec, Optimizer, OptimizerSpec, SchedulerSpec,
                    scheduler_value, triplet_margin_loss, triplet_margin_loss_np)


class TuningError(RuntimeError):
    pass


@dataclass(frozen=True)
class TuneConfig:
    batch_size: int = 14
    epoch_policy: str = "batches"       # "batches" or "samples"
    epoch_size: int = 1000              # batches (or samples) per epoch
    idle_epochs_to_stop: int = 10
    max_epochs: int = 1000
    freeze: str = "emb"
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    scheduler: Optional[SchedulerSpec] = None
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    mode: str = "query-only"            # or "both-tuned"
    max_seq_len: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise TuningError("batch_size must be >= 1")
        if self.idle_epochs_to_stop < 1:
            raise TuningError("idle_epochs_to_stop must be >= 1")
        if self.epoch_policy not in ("batches", "samples"):
            raise TuningError(f"unknown epoch policy {self.epoch_policy!r}")
        if self.mode not in ("query-only", "both-tuned"):
            raise TuningError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.scheduler is None:
            d.pop("scheduler")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TuneConfig":
        d = dict(d)
        d["optimizer"] = OptimizerSpec(**d.get("optimizer", {}))
        if "scheduler" in d and d["scheduler"] is not None:
            d["scheduler"] = SchedulerSpec(**d["scheduler"])
        else:
            d["scheduler"] = None
        d["loss"] = LossSpec(**d.get("loss", {}))
        return cls(**d)

    @property
    def batches_per_epoch(self) -> int:
        if self.epoch_policy == "batches":
            return self.epoch_size
        n = self.epoch_size // self.batch_size
        if n < 1:
            raise TuningError("epoch_size smaller than one batch")
        return n


@dataclass
class EpochRecord:
    epoch: int
    val_loss: float
    val_errors: int
    accepted: bool


@dataclass
class RunRecord:
    initial_loss: float
    initial_errors: int
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0                 # 0 = initial model
    total_steps: int = 0
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _tokenize_triplets(samples: Sequence[TripletSample], vocab: Vocab,
                       max_len: int) -> List[Tuple[list, list, list]]:
    """Take the first positive and first negative of each sample."""
    out = []
    for s in samples:
        if not s.positives or not s.negatives:
            raise TuningError("tuning triplets need >=1 positive and >=1 negative")
        out.append((vocab.encode(s.query, max_len),
                    vocab.encode(s.positives[0], max_len),
                    vocab.encode(s.negatives[0], max_len)))
    return out


def _pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
    return ids


def _encode_eval(tree, token_lists, config) -> np.ndarray:
    tape = T.Tape()
    leaves = wrap_params(tape, tree)
    return encode_batch(leaves, _pad_batch(token_lists), config).data


def validate(model: DualEncoder, valid_tokens: Sequence[Tuple[list, list, list]],
             loss_spec: LossSpec) -> Tuple[float, int]:
    """(mean triplet loss, count of triplets where the positive is not
    strictly closer than the negative to the anchor)."""
    if not valid_tokens:
        raise TuningError("validation set is empty")
    anchors = _encode_eval(model.query_params, [t[0] for t in valid_tokens], model.config)
    pos = _encode_eval(model.text_params, [t[1] for t in valid_tokens], model.config)
    neg = _encode_eval(model.text_params, [t[2] for t in valid_tokens], model.config)
    losses = triplet_margin_loss_np(anchors, pos, neg, loss_spec.margin)
    dp = np.linalg.norm(anchors - pos, axis=-1)
    dn = np.linalg.norm(anchors - neg, axis=-1)
    errors = int(np.sum(dp >= dn))
    return float(losses.mean()), errors


def validate_samples(model: DualEncoder, samples: Sequence[TripletSample],
                     vocab: Vocab, loss_spec: LossSpec = LossSpec(),
                     max_len: int = 64) -> Tuple[float, int]:
    return validate(model, _tokenize_triplets(samples, vocab, max_len), loss_spec)


def _epoch_index_stream(n_samples: int, needed: int, rng: T.Rng) -> np.ndarray:
    """Fresh permutations, concatenated until `needed` indices are available."""
    chunks = []
    got = 0
    while got < needed:
        perm = rng.permutation(n_samples)
        chunks.append(perm)
        got += n_samples
    return np.concatenate(chunks)[:needed]


def tune(model: DualEncoder, train: Sequence[TripletSample],
         valid: Sequence[TripletSample], cfg: TuneConfig, vocab: Vocab,
         validate_fn: Optional[Callable[[DualEncoder], Tuple[float, int]]] = None,
         ) -> Tuple[DualEncoder, RunRecord]:
    """Tune `model` in place-free fashion; returns (best checkpoint, record).

    `validate_fn` defaults to the real validation pass; tests may inject a
    stub to exercise the acceptance rule.
    """
    if not valid and validate_fn is None:
        raise TuningError("validation set is empty")
    if not train:
        raise TuningError("training set is empty")

    work = model.copy()
    train_tok = _tokenize_triplets(train, vocab, cfg.max_seq_len)
    valid_tok = _tokenize_triplets(valid, vocab, cfg.max_seq_len) if valid else []

    if validate_fn is None:
        validate_fn = lambda m: validate(m, valid_tok, cfg.loss)

    spec = parse_freeze_spec(cfg.freeze)
    q_train = trainable_names(spec, work.query_params.keys())
    trainable = [("query", n) for n in q_train]
    if cfg.mode == "both-tuned":
        trainable += [("text", n) for n in trainable_names(spec, work.text_params.keys())]
    flat_trainable = {f"{side}.{name}" for side, name in trainable}

    optimizer = Optimizer(cfg.optimizer)
    rng = T.Rng(cfg.seed).spawn(1)

    init_loss, init_errors = validate_fn(work)
    record = RunRecord(initial_loss=init_loss, initial_errors=init_errors)
    best_loss, best_errors = init_loss, init_errors
    best = work.copy()
    idle = 0
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = _epoch_index_stream(len(train_tok), cfg.batches_per_epoch * cfg.batch_size, rng)
        for b in range(cfg.batches_per_epoch):
            batch = [train_tok[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            tape = T.Tape()
            q_leaves = wrap_params(tape, work.query_params, flat_trainable, prefix="query.")
            t_leaves = wrap_params(tape, work.text_params, flat_trainable, prefix="text.")
            anchors = encode_batch(q_leaves, _pad_batch([t[0] for t in batch]), work.config)
            texts = encode_batch(t_leaves, _pad_batch([t[1] for t in batch] +
                                                      [t[2] for t in batch]), work.config)
            n = len(batch)
            pos = _slice(texts, 0, n)
            neg = _slice(texts, n, 2 * n)
            loss = triplet_margin_loss(anchors, pos, neg, cfg.loss)
            if not np.isfinite(loss.item()):
                raise TuningError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)

            lr = None
            if cfg.scheduler is not None:
                lr = scheduler_value(cfg.scheduler, step)
            grads: Dict[str, np.ndarray] = {}
            params: Dict[str, np.ndarray] = {}
            for side, leaves, tree in (("query", q_leaves, work.query_params),
                                       ("text", t_leaves, work.text_params)):
                for pname, leaf in leaves.items():
                    key = f"{side}.{pname}"
                    if key in flat_trainable and leaf.grad is not None:
                        grads[key] = leaf.grad
                        params[key] = tree[pname]
            optimizer.step(params, grads, lr=lr)
            step += 1

        val_loss, val_errors = validate_fn(work)
        accepted = val_loss < best_loss and val_errors < best_errors
        record.epochs.append(EpochRecord(epoch, val_loss, int(val_errors), accepted))
        if accepted:
            best_loss, best_errors = val_loss, val_errors
            best = work.copy()
            record.best_epoch = epoch
            idle = 0
        else:
            idle += 1
            if idle >= cfg.idle_epochs_to_stop:
                record.stop_reason = f"{cfg.idle_epochs_to_stop} consecutive idle epochs"
                break
    else:
        record.stop_reason = f"max_epochs ({cfg.max_epochs}) reached"

    record.total_steps = step
    return best, record


def _slice(t: T.Tensor, start: int, stop: int) -> T.Tensor:
    """Row slice along axis 0 with gradient routing."""
    out = t.data[start:stop]

    def backward(g):
        full = np.zeros_like(t.data)
        full[start:stop] = g
        T._accum(t, full)

    return T._make(out, (t,), backward)
