"""Optimizer, budget, and adaptation-engine behavior."""

import warnings

import numpy as np
import pytest

import padapt.autodiff as ad
from padapt.adapt import (
    AdaptBudget,
    adapt_self_training,
    adapt_speaker_code,
    adapt_supervised,
    evaluate_model,
    extract_features,
    finetune_all,
    forward_with_code,
    new_speaker_code_adapter,
    parameter_report,
    predict_classification,
    predict_sequences,
    pretrain,
    pseudo_label,
    train_speaker_code,
    train_speaker_invariant,
)
from padapt.autodiff import Tensor
from padapt.errors import CompatibilityError, ContractError, NumericError
from padapt.losses import cross_entropy_batch
from padapt.model import (
    TASK_CLASSIFICATION,
    TASK_CTC,
    ConvStage,
    ModelConfig,
    RecognizerModel,
    checkpoint_bytes,
    models_state_equal,
    ring_parameter_count,
    validate_config,
)
from padapt.optim import AdamW
from padapt.padding import init_user_padding


def tiny_model(task: str = TASK_CLASSIFICATION, vocab: int = 3, seed: int = 0) -> RecognizerModel:
    cfg = ModelConfig(
        task=task,
        vocab_size=vocab,
        frontend=(ConvStage(4, 3, 2, 1), ConvStage(4, 3, 1, 1)),
        udp_layer_indices=(0, 1),
        backend_width=8,
        input_hw=(8, 8),
        max_frames=4,
        seed=seed,
    )
    validate_config(cfg)
    return RecognizerModel(cfg)


def class_data(n: int = 12, vocab: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    clips = rng.normal(size=(n, 2, 1, 8, 8))
    labels = rng.integers(0, vocab, size=n)
    return clips, labels


def ctc_data(n: int = 10, vocab: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    clips = rng.normal(size=(n, 4, 1, 8, 8))
    targets = [tuple(rng.integers(1, vocab + 1, size=rng.integers(1, 3)).tolist()) for _ in range(n)]
    return clips, targets


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


def test_adamw_matches_hand_computed_steps() -> None:
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    m = v = 0.0
    x = 1.0
    for t in range(1, 4):
        g = 2.0 * x  # d/dx of x^2 at the reference trajectory
        p.grad = np.array([2.0 * p.data[0]])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        x = x - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        assert p.data[0] == pytest.approx(x, rel=1e-12)


def test_adamw_minimizes_quadratic() -> None:
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.05)
    for _ in range(400):
        p.grad = 2.0 * p.data
        opt.step()
    assert np.abs(p.data).max() < 1e-3


def test_adamw_weight_decay_is_decoupled() -> None:
    # with zero gradient, decay alone shrinks the parameter geometrically
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 * (1.0 - 0.1 * 0.5))


def test_adamw_skips_missing_grads() -> None:
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1)
    opt.step()
    assert p.data[0] == 1.0


def test_adamw_rejects_nonfinite_grad() -> None:
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        opt.step()


def test_adamw_contracts() -> None:
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ContractError):
        AdamW([], lr=0.1)
    with pytest.raises(ContractError):
        AdamW([p], lr=0.0)
    with pytest.raises(ContractError):
        AdamW([p], lr=0.1, betas=(1.0, 0.999))
    with pytest.raises(ContractError):
        AdamW([p], lr=0.1, weight_decay=-1.0)


def test_linear_softmax_reaches_separable_optimum() -> None:
    # sanity: optimizer + cross-entropy drive a linear model to 100% on
    # linearly separable points
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2.0, 0.3, size=(20, 2)), rng.normal(2.0, 0.3, size=(20, 2))])
    y = np.array([0] * 20 + [1] * 20)
    w = Tensor(np.zeros((2, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([w, b], lr=0.1)
    for _ in range(60):
        logits = ad.add_rowvec(ad.matmul(Tensor(x), w), b)
        loss = cross_entropy_batch(logits, y)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
    pred = np.argmax(x @ w.data + b.data, axis=1)
    assert np.all(pred == y)


# ---------------------------------------------------------------------------
# budgets
# ---------------------------------------------------------------------------


def test_minute_budget_converts_via_clip_duration() -> None:
    assert AdaptBudget.minutes(1.0).clip_count(200, 3.0) == 20
    assert AdaptBudget.minutes(1.0).clip_count(300, 1.16) == 52
    assert AdaptBudget.minutes(3.0).clip_count(300, 1.16) == 155
    assert AdaptBudget.minutes(5.0).clip_count(300, 1.16) == 259


def test_fraction_and_all_budgets() -> None:
    assert AdaptBudget.fraction(0.1).clip_count(150, 3.0) == 15
    assert AdaptBudget.everything().clip_count(7, 3.0) == 7


def test_budget_subsets_nest_within_a_fold() -> None:
    small = AdaptBudget.minutes(1.0, seed=3, folds=5)
    large = AdaptBudget.minutes(3.0, seed=3, folds=5)
    for fold in range(5):
        a = small.subset_indices(100, 3.0, fold)
        b = large.subset_indices(100, 3.0, fold)
        assert set(a.tolist()) <= set(b.tolist())
        assert np.array_equal(a, b[: len(a)])


def test_budget_subsets_disjoint_across_folds_when_small() -> None:
    budget = AdaptBudget.minutes(1.0, seed=9, folds=5)
    taken: set = set()
    for fold in range(5):
        idx = set(budget.subset_indices(100, 3.0, fold).tolist())
        assert len(idx) == 20
        assert not (taken & idx)
        taken |= idx


def test_budget_subsets_deterministic_per_seed() -> None:
    a = AdaptBudget.minutes(1.0, seed=4).subset_indices(90, 3.0, 2)
    b = AdaptBudget.minutes(1.0, seed=4).subset_indices(90, 3.0, 2)
    c = AdaptBudget.minutes(1.0, seed=5).subset_indices(90, 3.0, 2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_budget_contracts() -> None:
    with pytest.raises(ContractError):
        AdaptBudget.minutes(0.0)
    with pytest.raises(ContractError):
        AdaptBudget.fraction(1.5)
    with pytest.raises(ContractError):
        AdaptBudget("sometimes")
    with pytest.raises(ContractError):
        AdaptBudget.minutes(1.0).clip_count(5, 3.0)  # wants 20 clips, pool of 5
    with pytest.raises(ContractError):
        AdaptBudget.minutes(1.0, folds=5).subset_indices(100, 3.0, 5)
    with pytest.raises(ContractError):
        AdaptBudget.fraction(0.001).clip_count(10, 3.0)  # rounds to zero clips


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def test_pretrain_reduces_loss_and_freezes_on_exit() -> None:
    model = tiny_model()
    clips, labels = class_data()
    hist = pretrain(model, clips, labels, epochs=4, batch_size=4, seed=1)
    assert len(hist["epoch_loss"]) == 4
    assert hist["epoch_loss"][-1] < hist["epoch_loss"][0]
    assert model.training is False
    assert all(not t.requires_grad for t in model.parameters())


def test_pretrain_is_deterministic() -> None:
    clips, labels = class_data()
    a, b = tiny_model(), tiny_model()
    pretrain(a, clips, labels, epochs=2, batch_size=4, seed=5)
    pretrain(b, clips, labels, epochs=2, batch_size=4, seed=5)
    assert models_state_equal(a, b)


def test_pretrain_seed_changes_trajectory() -> None:
    clips, labels = class_data()
    a, b = tiny_model(), tiny_model()
    pretrain(a, clips, labels, epochs=2, batch_size=4, seed=5)
    pretrain(b, clips, labels, epochs=2, batch_size=4, seed=6)
    assert not models_state_equal(a, b)


def test_pretrain_aborts_on_nonfinite_loss() -> None:
    model = tiny_model()
    clips, labels = class_data()
    model.head_weight.data[0, 0] = np.nan
    with pytest.raises(NumericError, match="epoch 0"):
        pretrain(model, clips, labels, epochs=1, batch_size=4)


def test_pretrain_writes_checkpoint(tmp_path) -> None:
    model = tiny_model()
    clips, labels = class_data()
    path = tmp_path / "model.ckpt"
    pretrain(model, clips, labels, epochs=1, batch_size=4, checkpoint_path=path)
    assert path.read_bytes() == checkpoint_bytes(model)


def test_pretrain_sequence_task_runs() -> None:
    model = tiny_model(task=TASK_CTC, vocab=4)
    clips, targets = ctc_data()
    hist = pretrain(model, clips, targets, epochs=3, batch_size=5, seed=2)
    assert hist["epoch_loss"][-1] < hist["epoch_loss"][0]


# ---------------------------------------------------------------------------
# supervised ring adaptation
# ---------------------------------------------------------------------------


def test_adapt_supervised_moves_only_rings() -> None:
    model = tiny_model()
    clips, labels = class_data()
    pretrain(model, clips, labels, epochs=2, batch_size=4)
    frozen = checkpoint_bytes(model)
    pad = init_user_padding(model, "spk")
    adapted, hist = adapt_supervised(model, pad, clips, labels, epochs=3, batch_size=6)
    assert checkpoint_bytes(model) == frozen
    assert any(not np.array_equal(pad.rings[i], adapted.rings[i]) for i in pad.rings)
    assert hist["epoch_loss"][-1] < hist["epoch_loss"][0]
    # incoming padding untouched
    assert all(np.all(r == 0) for r in pad.rings.values())


def test_adapt_supervised_zero_epochs_is_identity() -> None:
    model = tiny_model()
    clips, labels = class_data()
    pad = init_user_padding(model, "spk")
    adapted, hist = adapt_supervised(model, pad, clips, labels, epochs=0)
    assert adapted.equals(pad)
    assert hist["steps"] == 0


def test_adapt_supervised_rejects_foreign_padding() -> None:
    model = tiny_model(seed=0)
    other = tiny_model(seed=1)
    clips, labels = class_data()
    pad = init_user_padding(other, "spk")
    with pytest.raises(CompatibilityError):
        adapt_supervised(model, pad, clips, labels, epochs=1)


def test_adapt_supervised_deterministic_per_seed() -> None:
    model = tiny_model()
    clips, labels = class_data()
    pad = init_user_padding(model, "spk")
    a, _ = adapt_supervised(model, pad, clips, labels, epochs=2, batch_size=4, seed=3)
    b, _ = adapt_supervised(model, pad, clips, labels, epochs=2, batch_size=4, seed=3)
    c, _ = adapt_supervised(model, pad, clips, labels, epochs=2, batch_size=4, seed=4)
    assert a.equals(b)
    assert not a.equals(c)


def test_adapt_supervised_early_stop() -> None:
    model = tiny_model()
    clips, labels = class_data()
    pad = init_user_padding(model, "spk")
    # an absurdly large min_delta means only the first epoch (which sets the
    # baseline) counts as an improvement; patience stale epochs then stop it
    _, hist = adapt_supervised(
        model, pad, clips, labels, epochs=50, batch_size=6, patience=3, min_delta=1e9
    )
    assert hist["stopped_early"] is True
    assert len(hist["epoch_loss"]) == 1 + 3


def test_adapt_supervised_sequence_task() -> None:
    model = tiny_model(task=TASK_CTC, vocab=4)
    clips, targets = ctc_data()
    pad = init_user_padding(model, "spk")
    frozen = checkpoint_bytes(model)
    adapted, hist = adapt_supervised(model, pad, clips, targets, epochs=3, batch_size=5)
    assert checkpoint_bytes(model) == frozen
    assert hist["epoch_loss"][-1] < hist["epoch_loss"][0]
    assert any(np.any(r != 0) for r in adapted.rings.values())


# ---------------------------------------------------------------------------
# self-training
# ---------------------------------------------------------------------------


def test_pseudo_label_confidence_filter() -> None:
    model = tiny_model()
    clips, labels = class_data()
    keep_all, labels_all, rep_all = pseudo_label(
        model, clips, threshold=0.0, true_labels=labels
    )
    assert rep_all.total == len(clips) and rep_all.kept == len(clips)
    assert rep_all.precision == rep_all.unfiltered_precision
    _, conf = predict_classification(model, clips)
    mid = float(np.median(conf))
    keep_mid, _, rep_mid = pseudo_label(model, clips, threshold=mid, true_labels=labels)
    assert 0 < rep_mid.kept < rep_all.kept
    assert np.all(conf[keep_mid] >= mid)


def test_self_training_keeps_weights_frozen_and_reports() -> None:
    model = tiny_model()
    clips, labels = class_data()
    pretrain(model, clips, labels, epochs=2, batch_size=4)
    frozen = checkpoint_bytes(model)
    pad = init_user_padding(model, "spk")
    adapted, report = adapt_self_training(
        model, pad, clips, threshold=0.0, epochs=2, batch_size=6, true_labels=labels
    )
    assert checkpoint_bytes(model) == frozen
    assert report["rounds"][0].kept == len(clips)
    assert report["rounds"][0].precision is not None
    assert any(np.any(r != 0) for r in adapted.rings.values())


def test_self_training_impossible_threshold_warns_and_returns_identity() -> None:
    model = tiny_model()
    clips, _ = class_data()
    pad = init_user_padding(model, "spk")
    with pytest.warns(UserWarning, match="no predictions"):
        adapted, report = adapt_self_training(model, pad, clips, threshold=1.0, epochs=2)
    assert adapted.equals(pad)
    assert report["rounds"][0].kept == 0


def test_self_training_multiple_rounds_progress() -> None:
    model = tiny_model()
    clips, labels = class_data()
    pad = init_user_padding(model, "spk")
    adapted, report = adapt_self_training(
        model, pad, clips, threshold=0.0, rounds=2, epochs=1, batch_size=6
    )
    assert len(report["rounds"]) == 2
    assert all(r.kept == len(clips) for r in report["rounds"])


def test_self_training_default_threshold_follows_task() -> None:
    model = tiny_model()
    clips, _ = class_data()
    pad = init_user_padding(model, "spk")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, report = adapt_self_training(model, pad, clips, epochs=0)
    assert report["threshold"] == 0.8
    seq_model = tiny_model(task=TASK_CTC, vocab=4)
    seq_clips, _ = ctc_data()
    seq_pad = init_user_padding(seq_model, "spk")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, report = adapt_self_training(seq_model, seq_pad, seq_clips, epochs=0)
    assert report["threshold"] == 0.9


# ---------------------------------------------------------------------------
# full finetuning baseline
# ---------------------------------------------------------------------------


def test_finetune_all_copies_and_reports() -> None:
    model = tiny_model()
    clips, labels = class_data()
    original = checkpoint_bytes(model)
    tuned, hist = finetune_all(model, clips, labels, epochs=2, batch_size=4)
    assert checkpoint_bytes(model) == original
    assert not models_state_equal(model, tuned)
    report = hist["parameter_report"]
    assert report["ring_parameters"] == ring_parameter_count(model.config)
    assert report["ring_fraction"] == pytest.approx(
        report["ring_parameters"] / report["model_parameters"]
    )
    # normalization stats are not re-estimated from tiny adaptation sets
    for (_, a), (_, b) in zip(model.named_buffers(), tuned.named_buffers()):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# speaker-invariant training
# ---------------------------------------------------------------------------


def test_zero_weight_reversal_reproduces_pretraining() -> None:
    clips, labels = class_data()
    speakers = ["a", "b", "c"] * 4
    plain, reversed_ = tiny_model(), tiny_model()
    pretrain(plain, clips, labels, epochs=2, batch_size=4, seed=7)
    train_speaker_invariant(
        reversed_, clips, labels, speakers, grl_weight=0.0, epochs=2, batch_size=4, seed=7
    )
    assert models_state_equal(plain, reversed_)


def test_nonzero_reversal_changes_trajectory() -> None:
    clips, labels = class_data()
    speakers = ["a", "b", "c"] * 4
    plain, reversed_ = tiny_model(), tiny_model()
    pretrain(plain, clips, labels, epochs=2, batch_size=4, seed=7)
    head, hist = train_speaker_invariant(
        reversed_, clips, labels, speakers, grl_weight=1.0, epochs=2, batch_size=4, seed=7
    )
    assert not models_state_equal(plain, reversed_)
    assert hist["speakers"] == ["a", "b", "c"]
    assert head["weight"].data.shape == (plain.feature_dim, 3)


def test_speaker_head_trains_even_at_zero_weight() -> None:
    # the head itself sees an ordinary gradient; only the front-end's copy is
    # scaled by the reversal weight
    clips, labels = class_data(n=18)
    speakers = (["a"] * 6) + (["b"] * 6) + (["c"] * 6)
    model = tiny_model()
    _, hist = train_speaker_invariant(
        model, clips, labels, speakers, grl_weight=0.0, epochs=4, batch_size=6, seed=1
    )
    assert hist["epoch_speaker_loss"][-1] < hist["epoch_speaker_loss"][0]


# ---------------------------------------------------------------------------
# speaker-code baseline
# ---------------------------------------------------------------------------


def test_fresh_adapter_with_zero_code_is_baseline() -> None:
    model = tiny_model()
    clips, _ = class_data()
    adapter = new_speaker_code_adapter(model, dims=(4, 3, 3), seed=1)
    code = adapter.code_for("new", np.float64)
    with ad.no_grad():
        base = model.forward_batch(clips).data
        conditioned = forward_with_code(model, adapter, clips, code).data
    assert np.array_equal(base, conditioned)


def test_speaker_code_three_stage_procedure() -> None:
    model = tiny_model()
    clips, labels = class_data()
    speakers = ["a", "b", "c"] * 4
    frozen = checkpoint_bytes(model)
    adapter = new_speaker_code_adapter(model, dims=(4, 3, 3), seed=1)

    # stage two: adapter network + training-speaker codes move, model doesn't
    hist2 = train_speaker_code(model, adapter, clips, labels, speakers, epochs=4, batch_size=4)
    assert checkpoint_bytes(model) == frozen
    assert np.any(adapter.weights["w3"].data != 0)
    assert hist2["epoch_loss"][-1] < hist2["epoch_loss"][0]
    assert set(adapter.codes) == {"a", "b", "c"}

    # stage three: only the new speaker's code moves
    net_before = [t.data.copy() for t in adapter.network_parameters()]
    code, hist3 = adapt_speaker_code(model, adapter, clips, labels, "new", epochs=4, batch_size=6)
    assert checkpoint_bytes(model) == frozen
    assert np.any(code.data != 0)
    for before, tensor in zip(net_before, adapter.network_parameters()):
        assert np.array_equal(before, tensor.data)


def test_stage_three_needs_a_trained_adapter() -> None:
    # with the last layer still zero, features are code-insensitive and the
    # code gradient vanishes: enrollment is a no-op by construction
    model = tiny_model()
    clips, labels = class_data()
    adapter = new_speaker_code_adapter(model, dims=(4, 3, 3), seed=1)
    code, _ = adapt_speaker_code(model, adapter, clips, labels, "new", epochs=2, batch_size=6)
    assert np.all(code.data == 0)


# ---------------------------------------------------------------------------
# prediction and evaluation plumbing
# ---------------------------------------------------------------------------


def test_classification_metrics_self_consistent() -> None:
    model = tiny_model()
    clips, _ = class_data()
    pred, conf = predict_classification(model, clips)
    assert np.all((conf > 0) & (conf <= 1))
    metrics = evaluate_model(model, clips, pred)
    assert metrics["accuracy"] == 1.0


def test_sequence_metrics_self_consistent() -> None:
    model = tiny_model(task=TASK_CTC, vocab=4)
    clips, _ = ctc_data()
    hyps, conf = predict_sequences(model, clips, beam_width=8)
    assert np.all((conf > 0) & (conf <= 1))
    metrics = evaluate_model(model, clips, hyps, beam_width=8)
    assert metrics["wer"] == 0.0
    assert metrics["sequence_accuracy"] == 1.0


def test_evaluation_restores_training_flag() -> None:
    model = tiny_model()
    clips, labels = class_data()
    model.set_training(True)
    evaluate_model(model, clips, labels)
    assert model.training is True
    model.set_training(False)


def test_extract_features_shape_and_determinism() -> None:
    model = tiny_model()
    clips, _ = class_data()
    a = extract_features(model, clips, batch_size=5)
    b = extract_features(model, clips, batch_size=12)
    assert a.shape == (len(clips), model.feature_dim)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_parameter_report_ratio() -> None:
    model = tiny_model()
    report = parameter_report(model)
    assert report["ring_parameters"] == ring_parameter_count(model.config)
    assert 0 < report["ring_fraction"] < 1
