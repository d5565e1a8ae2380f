"""Tuning loop: acceptance rule, stopping, freeze contract, determinism."""

import numpy as np
import pytest

from duotune import tensor as T
from duotune.data import TripletSample
from duotune.encoder import DualEncoder, EncoderConfig, Vocab, trees_equal
from duotune.optim import LossSpec, OptimizerSpec
from duotune.tuning import (RunRecord, TuneConfig, TuningError, tune, validate,
                            validate_samples, _tokenize_triplets)

CFG = EncoderConfig(vocab_size=32, hidden=16, n_blocks=2, n_heads=2,
                    intermediate=32, max_positions=16)
VOCAB = Vocab([f"w{i:03d}" for i in range(30)])


def words(idx):
    return " ".join(f"w{i:03d}" for i in idx)


def topic_triplets(n, seed=0):
    """Two token 'topics': queries match positives from the same half of the
    vocabulary, negatives come from the other half."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        t = rng.integers(0, 2)
        lo, hi = (0, 15) if t == 0 else (15, 30)
        olo, ohi = (15, 30) if t == 0 else (0, 15)
        out.append(TripletSample(
            words(rng.integers(lo, hi, size=4)),
            [words(rng.integers(lo, hi, size=4))],
            [words(rng.integers(olo, ohi, size=4))]))
    return out


def small_config(**kw):
    base = dict(batch_size=4, epoch_policy="batches", epoch_size=3,
                idle_epochs_to_stop=3, max_epochs=50, freeze="emb",
                optimizer=OptimizerSpec(kind="adamw", lr=1e-3), seed=0)
    base.update(kw)
    return TuneConfig(**base)


# --- config ---------------------------------------------------------------------

def test_epoch_accounting_for_both_policies():
    assert TuneConfig(epoch_policy="batches", epoch_size=1000,
                      batch_size=56).batches_per_epoch == 1000
    assert TuneConfig(epoch_policy="samples", epoch_size=14000,
                      batch_size=56).batches_per_epoch == 250
    assert TuneConfig(epoch_policy="samples", epoch_size=14000,
                      batch_size=14).batches_per_epoch == 1000


def test_config_validation():
    with pytest.raises(TuningError):
        TuneConfig(batch_size=0)
    with pytest.raises(TuningError):
        TuneConfig(idle_epochs_to_stop=0)
    with pytest.raises(TuningError):
        TuneConfig(epoch_policy="sideways")


def test_config_dict_roundtrip():
    cfg = small_config(scheduler=None)
    again = TuneConfig.from_dict(cfg.to_dict())
    assert again == cfg


# --- validate --------------------------------------------------------------------

def test_validate_zero_errors_when_positive_equals_anchor():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    samples = [TripletSample(words([3, 4]), [words([3, 4])], [words([9, 10])])
               for _ in range(5)]
    _, errors = validate_samples(model, samples, VOCAB)
    assert errors == 0


def test_validate_all_errors_when_negative_equals_anchor():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    samples = [TripletSample(words([3, 4]), [words([9, 10])], [words([3, 4])])
               for _ in range(5)]
    _, errors = validate_samples(model, samples, VOCAB)
    assert errors == 5


def test_validate_matches_brute_force_recount():
    from duotune.encoder import encode
    model = DualEncoder.twin_init(CFG, T.Rng(3))
    samples = topic_triplets(30, seed=5)
    loss, errors = validate_samples(model, samples, VOCAB)

    recount = 0
    for s in samples:
        a = encode(model.query_params, VOCAB.encode(s.query, 64), CFG)
        p = encode(model.text_params, VOCAB.encode(s.positives[0], 64), CFG)
        n = encode(model.text_params, VOCAB.encode(s.negatives[0], 64), CFG)
        if np.linalg.norm(a - p) >= np.linalg.norm(a - n):
            recount += 1
    assert errors == recount
    assert loss >= 0.0


def test_validate_empty_set_rejected():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    with pytest.raises(TuningError):
        validate(model, [], LossSpec())


def test_tokenize_takes_first_positive_and_negative():
    s = TripletSample(words([2]), [words([3]), words([4])], [words([5]), words([6])])
    toks = _tokenize_triplets([s], VOCAB, 64)
    assert toks == [(VOCAB.encode(words([2])), VOCAB.encode(words([3])),
                     VOCAB.encode(words([5])))]


# --- tune -------------------------------------------------------------------------

def test_lr_zero_run_is_a_no_op_and_stops_on_idle():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    train = topic_triplets(20)
    valid = topic_triplets(10, seed=1)
    cfg = small_config(optimizer=OptimizerSpec(kind="adamw", lr=0.0))
    best, record = tune(model, train, valid, cfg, VOCAB)

    assert all(not e.accepted for e in record.epochs)
    assert len(record.epochs) == cfg.idle_epochs_to_stop
    assert record.best_epoch == 0
    assert trees_equal(best.query_params, model.query_params)
    assert trees_equal(best.text_params, model.text_params)


def test_freeze_contract_embeddings_untouched_after_tuning():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    train = topic_triplets(40)
    valid = topic_triplets(12, seed=1)
    cfg = small_config(max_epochs=3, idle_epochs_to_stop=2)
    best, _ = tune(model, train, valid, cfg, VOCAB)
    for name in model.query_params:
        if name.startswith("embeddings."):
            assert np.array_equal(best.query_params[name], model.query_params[name]), name
    # text side untouched in query-only mode
    assert trees_equal(best.text_params, model.text_params)


def test_tuning_reduces_validation_errors_on_separable_topics():
    model = DualEncoder.twin_init(CFG, T.Rng(1))
    train = topic_triplets(200, seed=2)
    valid = topic_triplets(60, seed=3)
    cfg = small_config(epoch_size=10, max_epochs=10, idle_epochs_to_stop=3,
                       optimizer=OptimizerSpec(kind="adamw", lr=1e-3))
    best, record = tune(model, train, valid, cfg, VOCAB)
    _, best_errors = validate_samples(best, valid, VOCAB)
    assert best_errors <= record.initial_errors


def test_same_seed_gives_bit_identical_runs():
    train = topic_triplets(30)
    valid = topic_triplets(10, seed=1)
    cfg = small_config(max_epochs=2, idle_epochs_to_stop=2)
    runs = []
    for _ in range(2):
        model = DualEncoder.twin_init(CFG, T.Rng(0))
        best, record = tune(model, train, valid, cfg, VOCAB)
        runs.append((best, record))
    assert trees_equal(runs[0][0].query_params, runs[1][0].query_params)
    assert runs[0][1].to_dict() == runs[1][1].to_dict()


def test_acceptance_requires_both_loss_and_errors_to_drop():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    train = topic_triplets(20)
    valid = topic_triplets(8, seed=1)
    # loss keeps dropping, error count never does -> nothing is accepted
    seq = iter([(1.0, 5), (0.9, 5), (0.8, 5), (0.7, 6), (0.6, 5)])
    cfg = small_config(idle_epochs_to_stop=4)
    best, record = tune(model, train, valid, cfg, VOCAB,
                        validate_fn=lambda m: next(seq))
    assert all(not e.accepted for e in record.epochs)
    assert record.best_epoch == 0
    assert trees_equal(best.query_params, model.query_params)


def test_best_checkpoint_is_from_last_accepted_epoch():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    train = topic_triplets(20)
    valid = topic_triplets(8, seed=1)
    # epoch 2 improves on both axes, later epochs never do
    seq = iter([(1.0, 10), (1.1, 12), (0.5, 4), (0.6, 4), (0.4, 5), (0.7, 9)])
    cfg = small_config(idle_epochs_to_stop=3)
    best, record = tune(model, train, valid, cfg, VOCAB,
                        validate_fn=lambda m: next(seq))
    assert record.best_epoch == 2
    assert [e.accepted for e in record.epochs] == [False, True, False, False, False]
    assert record.stop_reason.startswith("3 consecutive idle")
    # the checkpoint differs from the initial model (training did act)
    assert not trees_equal(best.query_params, model.query_params)


def test_run_aborts_on_empty_inputs():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    with pytest.raises(TuningError):
        tune(model, [], topic_triplets(5), small_config(), VOCAB)
    with pytest.raises(TuningError):
        tune(model, topic_triplets(5), [], small_config(), VOCAB)


def test_both_tuned_mode_changes_the_text_encoder():
    model = DualEncoder.twin_init(CFG, T.Rng(0))
    train = topic_triplets(40, seed=4)
    valid = topic_triplets(12, seed=5)
    cfg = small_config(mode="both-tuned", max_epochs=2, idle_epochs_to_stop=2,
                       optimizer=OptimizerSpec(kind="sgd", lr=1e-2))
    # force acceptance of the first epoch so the tuned tree is returned
    seq = iter([(1.0, 10), (0.5, 5), (0.6, 6), (0.7, 7)])
    best, _ = tune(model, train, valid, cfg, VOCAB, validate_fn=lambda m: next(seq))
    assert not trees_equal(best.text_params, model.text_params)
