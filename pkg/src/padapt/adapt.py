"""Training and adaptation engines.

Three families of routines live here:

* full-model training: ``pretrain`` and its gradient-reversal variant
  ``train_speaker_invariant``, plus the ``finetune_all`` baseline;
* ring adaptation against a frozen model: ``adapt_supervised`` (labeled
  clips) and ``adapt_self_training`` (pseudo-labels filtered by decoder
  confidence);
* the speaker-code baseline, a small conditioning network inserted after
  the frame front-end whose per-speaker code vector is the only thing
  trained at enrollment time.

All routines take clips as an ``[N, T, C, H, W]`` array and labels as an
``[N]`` integer array (classification) or a sequence of token tuples
(sequence transcription).  Randomness is keyed through
:func:`padapt.seeding.stable_rng`, so a (routine, seed) pair fully determines
the data order and any auxiliary initialization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError, ShapeError
from .losses import (
    beam_confidence,
    beam_decode,
    cross_entropy_batch,
    ctc_loss_batch,
    word_error_rate,
)
from .model import (
    TASK_CLASSIFICATION,
    TASK_CTC,
    RecognizerModel,
    clone_model,
    ring_parameter_count,
    save_checkpoint,
)
from .optim import AdamW
from .padding import UserPadding, check_padding_matches
from .seeding import stable_rng

DEFAULT_ADAPT_LR = 0.01
DEFAULT_PRETRAIN_LR = 0.001
DEFAULT_SEQUENCE_THRESHOLD = 0.9
DEFAULT_CLASSIFICATION_THRESHOLD = 0.8


# ---------------------------------------------------------------------------
# adaptation budgets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptBudget:
    """How much of a speaker's clip pool an adaptation run may use.

    ``minutes`` budgets convert to clip counts through the dataset's declared
    clip duration (``round(minutes * 60 / clip_seconds)``); ``fraction``
    budgets take a rounded share of the pool; ``all`` takes everything.

    Subsets are drawn from one seed-keyed master permutation of the pool,
    rotated by ``fold * (pool // folds)``: for a fixed fold, smaller budgets
    are prefixes of larger ones, and across folds the subsets are disjoint
    whenever the clip count is at most ``pool // folds``.
    """

    mode: str
    amount: float = 0.0
    seed: int = 0
    folds: int = 5

    def __post_init__(self) -> None:
        if self.mode not in ("minutes", "fraction", "all"):
            raise ContractError(f"unknown budget mode {self.mode!r}")
        if self.mode == "minutes" and not (self.amount > 0.0):
            raise ContractError(f"minutes budget must be positive, got {self.amount}")
        if self.mode == "fraction" and not (0.0 < self.amount <= 1.0):
            raise ContractError(f"fraction budget must lie in (0, 1], got {self.amount}")
        if self.folds < 1:
            raise ContractError(f"fold count must be positive, got {self.folds}")

    @classmethod
    def minutes(cls, amount: float, seed: int = 0, folds: int = 5) -> "AdaptBudget":
        return cls("minutes", float(amount), seed, folds)

    @classmethod
    def fraction(cls, amount: float, seed: int = 0, folds: int = 5) -> "AdaptBudget":
        return cls("fraction", float(amount), seed, folds)

    @classmethod
    def everything(cls, seed: int = 0, folds: int = 5) -> "AdaptBudget":
        return cls("all", 0.0, seed, folds)

    @property
    def label(self) -> str:
        """Short human/metrics tag: '1min', '3min', '10%', 'all'."""
        if self.mode == "minutes":
            return f"{self.amount:g}min"
        if self.mode == "fraction":
            return f"{100.0 * self.amount:g}%"
        return "all"

    def clip_count(self, pool_size: int, clip_seconds: float) -> int:
        if pool_size < 1:
            raise ContractError("budget over an empty clip pool")
        if self.mode == "all":
            return pool_size
        if self.mode == "minutes":
            if not (clip_seconds > 0.0):
                raise ContractError(f"clip duration must be positive, got {clip_seconds}")
            n = int(round(self.amount * 60.0 / clip_seconds))
        else:
            n = int(round(self.amount * pool_size))
        if n < 1:
            raise ContractError(f"budget {self.mode}={self.amount} yields no clips")
        if n > pool_size:
            raise ContractError(
                f"budget {self.mode}={self.amount} needs {n} clips but the pool has {pool_size}"
            )
        return n

    def subset_indices(self, pool_size: int, clip_seconds: float, fold: int) -> np.ndarray:
        """Pool indices for one (budget, fold) adaptation subset."""
        if not (0 <= fold < self.folds):
            raise ContractError(f"fold {fold} out of range for {self.folds} folds")
        n = self.clip_count(pool_size, clip_seconds)
        perm = stable_rng("budget-subset", self.seed).permutation(pool_size)
        start = fold * (pool_size // self.folds)
        rotated = np.concatenate([perm[start:], perm[:start]])
        return rotated[:n].copy()


# ---------------------------------------------------------------------------
# losses, prediction, evaluation
# ---------------------------------------------------------------------------


def _as_clip_tensor(model: RecognizerModel, clips) -> Tensor:
    if isinstance(clips, Tensor):
        return clips
    return Tensor(np.asarray(clips, dtype=model.config.numpy_dtype()))


def task_loss(model: RecognizerModel, clips, labels, padding=None) -> Tensor:
    """Mean task loss for a batch: cross-entropy or sequence (CTC) loss."""
    logits = model.forward_batch(clips, padding)
    if model.config.task == TASK_CLASSIFICATION:
        return cross_entropy_batch(logits, np.asarray(labels, dtype=np.int64))
    log_probs = ad.log_softmax_lastdim(logits)
    return ctc_loss_batch(log_probs, labels)


def _batch_ranges(n: int, batch_size: int | None):
    step = n if batch_size is None else int(batch_size)
    if step < 1:
        raise ContractError(f"batch size must be positive, got {batch_size}")
    for lo in range(0, n, step):
        yield lo, min(lo + step, n)


def predict_classification(model, clips, padding=None, batch_size: int = 64):
    """Argmax labels and their softmax probabilities, [N] + [N]."""
    if model.config.task != TASK_CLASSIFICATION:
        raise ContractError("predict_classification on a sequence model")
    clips = np.asarray(clips, dtype=model.config.numpy_dtype())
    labels = np.empty(clips.shape[0], dtype=np.int64)
    confidence = np.empty(clips.shape[0], dtype=np.float64)
    with ad.no_grad():
        for lo, hi in _batch_ranges(clips.shape[0], batch_size):
            logits = model.forward_batch(clips[lo:hi], padding).data
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            labels[lo:hi] = np.argmax(probs, axis=1)
            confidence[lo:hi] = probs[np.arange(probs.shape[0]), labels[lo:hi]]
    return labels, confidence


def predict_sequences(model, clips, padding=None, beam_width: int = 100, batch_size: int = 32):
    """Beam-decoded token tuples and their beam confidences."""
    if model.config.task != TASK_CTC:
        raise ContractError("predict_sequences on a classification model")
    clips = np.asarray(clips, dtype=model.config.numpy_dtype())
    sequences: list[tuple[int, ...]] = []
    confidence = np.empty(clips.shape[0], dtype=np.float64)
    with ad.no_grad():
        for lo, hi in _batch_ranges(clips.shape[0], batch_size):
            logits = model.forward_batch(clips[lo:hi], padding)
            log_probs = ad.log_softmax_lastdim(logits).data
            for row in range(log_probs.shape[0]):
                beams = beam_decode(log_probs[row], beam_width=beam_width)
                sequences.append(beams[0].tokens)
                confidence[lo + row] = beam_confidence(beams)
    return sequences, confidence


def evaluate_model(model, clips, labels, padding=None, *, batch_size: int = 64, beam_width: int = 32) -> dict:
    """Task metrics on a labeled set (running-stat normalization throughout).

    classification -> {"accuracy"}; sequence -> {"wer", "sequence_accuracy"}.
    """
    was_training = model.training
    model.set_training(False)
    try:
        if model.config.task == TASK_CLASSIFICATION:
            pred, _ = predict_classification(model, clips, padding, batch_size=batch_size)
            truth = np.asarray(labels, dtype=np.int64)
            if pred.shape != truth.shape:
                raise ShapeError(f"label count {truth.shape} != clip count {pred.shape}")
            return {"accuracy": float(np.mean(pred == truth))}
        hyps, _ = predict_sequences(model, clips, padding, beam_width=beam_width, batch_size=batch_size)
        refs = [tuple(int(t) for t in ref) for ref in labels]
        exact = float(np.mean([h == r for h, r in zip(hyps, refs)]))
        return {"wer": word_error_rate(refs, hyps), "sequence_accuracy": exact}
    finally:
        model.set_training(was_training)


def extract_features(model, clips, padding=None, batch_size: int = 64) -> np.ndarray:
    """Time-averaged front-end features per clip, [N, F] (no gradients)."""
    clips = np.asarray(clips, dtype=model.config.numpy_dtype())
    was_training = model.training
    model.set_training(False)
    out = np.empty((clips.shape[0], model.feature_dim), dtype=clips.dtype)
    try:
        with ad.no_grad():
            for lo, hi in _batch_ranges(clips.shape[0], batch_size):
                block = clips[lo:hi]
                b, t = block.shape[0], block.shape[1]
                flat = ad.reshape(_as_clip_tensor(model, block), (b * t,) + block.shape[2:])
                feats = model.frontend_features(flat)
                out[lo:hi] = feats.data.reshape(b, t, -1).mean(axis=1)
    finally:
        model.set_training(was_training)
    return out


# ---------------------------------------------------------------------------
# full-model training (pretraining, gradient-reversal variant, finetuning)
# ---------------------------------------------------------------------------


def _split_decay_params(model: RecognizerModel):
    decay = [t for name, t in model.named_parameters() if name.endswith(".weight")]
    plain = [t for name, t in model.named_parameters() if not name.endswith(".weight")]
    return decay, plain


def _check_finite_loss(value: float, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"training diverged: loss={value} at epoch {epoch}, batch {batch}")


def _encode_speakers(speakers) -> tuple[np.ndarray, list]:
    names = sorted(set(speakers))
    index = {s: i for i, s in enumerate(names)}
    return np.asarray([index[s] for s in speakers], dtype=np.int64), names


def _full_training_loop(
    model: RecognizerModel,
    clips,
    labels,
    *,
    epochs: int,
    batch_size: int | None,
    lr: float,
    weight_decay: float,
    seed: int,
    grl_weight: float = 0.0,
    speakers=None,
    speaker_head=None,
    update_norm_stats: bool = True,
) -> dict:
    """Shared mini-batch loop for pretraining and its gradient-reversal twin.

    The data-order RNG is keyed only by ``seed``, not by which variant runs,
    so a zero-weight gradient-reversal run consumes batches in exactly the
    same order as plain pretraining and reproduces its trajectory.
    """
    clips = np.asarray(clips, dtype=model.config.numpy_dtype())
    n = clips.shape[0]
    if n == 0:
        raise ContractError("training requires at least one clip")
    is_cls = model.config.task == TASK_CLASSIFICATION
    if is_cls:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    else:
        labels = [tuple(int(t) for t in seq) for seq in labels]
        if len(labels) != n:
            raise ShapeError(f"label count {len(labels)} != clip count {n}")

    spk_codes = None
    if speaker_head is not None:
        if speakers is None:
            raise ContractError("speaker-invariant training requires speaker labels")
        spk_codes, _ = _encode_speakers(speakers)
        if spk_codes.shape != (n,):
            raise ShapeError(f"speaker label count {spk_codes.shape} != clip count {n}")

    model.set_requires_grad(True)
    model.set_training(bool(update_norm_stats))
    decay, plain = _split_decay_params(model)
    optimizers = [AdamW(decay, lr, weight_decay=weight_decay), AdamW(plain, lr)]
    if speaker_head is not None:
        optimizers.append(AdamW(list(speaker_head.values()), lr))

    rng = stable_rng("pretrain-order", seed)
    history: dict = {"epoch_loss": [], "epoch_task_loss": [], "epoch_speaker_loss": [], "steps": 0}
    for epoch in range(epochs):
        order = rng.permutation(n)
        tot = tot_task = tot_spk = 0.0
        for bi, (lo, hi) in enumerate(_batch_ranges(n, batch_size)):
            idx = order[lo:hi]
            xb = Tensor(clips[idx])
            b, t = xb.data.shape[0], xb.data.shape[1]
            flat = ad.reshape(xb, (b * t,) + xb.data.shape[2:])
            frame_feats = model.frontend_features(flat)
            feats = ad.reshape(frame_feats, (b, t, model.feature_dim))
            logits = model.backend_head(feats)
            if is_cls:
                loss_task = cross_entropy_batch(logits, labels[idx])
            else:
                loss_task = ctc_loss_batch(ad.log_softmax_lastdim(logits), [labels[i] for i in idx])
            loss = loss_task
            spk_val = 0.0
            if speaker_head is not None:
                pooled = ad.mean_axis(feats, axis=1)
                reversed_feats = ad.grad_reverse(pooled, grl_weight)
                spk_logits = ad.add_rowvec(
                    ad.matmul(reversed_feats, speaker_head["weight"]), speaker_head["bias"]
                )
                loss_spk = cross_entropy_batch(spk_logits, spk_codes[idx])
                spk_val = float(loss_spk.data)
                loss = loss + loss_spk
            _check_finite_loss(float(loss.data), epoch, bi)
            ad.backward(loss)
            for opt in optimizers:
                opt.step()
                opt.zero_grad()
            history["steps"] += 1
            w = hi - lo
            tot += float(loss.data) * w
            tot_task += float(loss_task.data) * w
            tot_spk += spk_val * w
        history["epoch_loss"].append(tot / n)
        history["epoch_task_loss"].append(tot_task / n)
        history["epoch_speaker_loss"].append(tot_spk / n)
    model.set_training(False)
    model.set_requires_grad(False)
    return history


def pretrain(
    model: RecognizerModel,
    clips,
    labels,
    *,
    epochs: int = 10,
    batch_size: int | None = 32,
    lr: float = DEFAULT_PRETRAIN_LR,
    weight_decay: float = 0.01,
    seed: int = 0,
    checkpoint_path=None,
) -> dict:
    """Train every model weight on pooled multi-speaker data (zero rings).

    Weight decay applies to conv/linear weights only, not biases or norm
    parameters.  Returns a history dict with per-epoch mean losses; raises
    NumericError with epoch/batch diagnostics if the loss goes non-finite.
    """
    history = _full_training_loop(
        model,
        clips,
        labels,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        weight_decay=weight_decay,
        seed=seed,
    )
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return history


def new_speaker_head(model: RecognizerModel, n_speakers: int, seed: int = 0) -> dict:
    """Linear speaker classifier on pooled front-end features.

    Drawn from its own RNG stream so adding it never perturbs model init.
    """
    if n_speakers < 2:
        raise ContractError(f"speaker head needs at least 2 speakers, got {n_speakers}")
    rng = stable_rng("speaker-head", seed)
    f = model.feature_dim
    scale = 1.0 / np.sqrt(f)
    dt = model.config.numpy_dtype()
    return {
        "weight": Tensor(rng.uniform(-scale, scale, size=(f, n_speakers)).astype(dt), requires_grad=True),
        "bias": Tensor(np.zeros(n_speakers, dtype=dt), requires_grad=True),
    }


def train_speaker_invariant(
    model: RecognizerModel,
    clips,
    labels,
    speakers,
    *,
    grl_weight: float,
    epochs: int = 10,
    batch_size: int | None = 32,
    lr: float = DEFAULT_PRETRAIN_LR,
    weight_decay: float = 0.01,
    seed: int = 0,
    checkpoint_path=None,
) -> tuple[dict, dict]:
    """Pretraining with an adversarial speaker classifier on the front-end.

    The speaker head trains to identify speakers from pooled front-end
    features; the front-end receives that classifier's gradient negated and
    scaled by ``grl_weight``, pushing its features toward speaker invariance.
    The task loss is unchanged in form, and ``grl_weight=0`` reproduces the
    plain pretraining trajectory for the same seed.

    Returns (speaker_head, history); the model is trained in place.
    """
    if grl_weight < 0.0:
        raise ContractError(f"gradient-reversal weight must be non-negative, got {grl_weight}")
    codes, names = _encode_speakers(speakers)
    head = new_speaker_head(model, len(names), seed=seed)
    history = _full_training_loop(
        model,
        clips,
        labels,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        weight_decay=weight_decay,
        seed=seed,
        grl_weight=grl_weight,
        speakers=speakers,
        speaker_head=head,
    )
    history["speakers"] = names
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return head, history


def finetune_all(
    model: RecognizerModel,
    clips,
    labels,
    *,
    lr: float = DEFAULT_PRETRAIN_LR,
    epochs: int = 30,
    batch_size: int | None = 32,
    weight_decay: float = 0.01,
    seed: int = 0,
) -> tuple[RecognizerModel, dict]:
    """Copy the model and update every parameter on the adaptation set.

    The speaker-dependent-model baseline: the returned copy carries a full
    parameter set per speaker where ring adaptation carries only its rings
    (see ``parameter_report``).  Normalization running stats stay frozen —
    adaptation sets are far too small to re-estimate them.
    """
    tuned = clone_model(model)
    history = _full_training_loop(
        tuned,
        clips,
        labels,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        weight_decay=weight_decay,
        seed=seed,
        update_norm_stats=False,
    )
    history["parameter_report"] = parameter_report(model)
    return tuned, history


def parameter_report(model: RecognizerModel) -> dict:
    """Per-speaker cost of ring adaptation vs a full model copy."""
    ring = ring_parameter_count(model.config)
    full = model.parameter_count()
    return {
        "ring_parameters": int(ring),
        "model_parameters": int(full),
        "ring_fraction": float(ring) / float(full),
    }


# ---------------------------------------------------------------------------
# ring adaptation against a frozen model
# ---------------------------------------------------------------------------


def adapt_supervised(
    model: RecognizerModel,
    padding: UserPadding,
    clips,
    labels,
    *,
    lr: float = DEFAULT_ADAPT_LR,
    epochs: int = 30,
    batch_size: int | None = 32,
    patience: int = 5,
    min_delta: float = 1e-4,
    seed: int = 0,
) -> tuple[UserPadding, dict]:
    """Optimize one speaker's rings on labeled clips; weights never move.

    The model is put in frozen evaluation mode (no gradients into weights, no
    running-stat updates) and only the ring tensors receive AdamW steps, with
    no weight decay.  Stops early after ``patience`` epochs without the mean
    epoch loss improving by more than ``min_delta``.  ``epochs=0`` returns an
    unchanged copy.
    """
    check_padding_matches(padding, model)
    clips = np.asarray(clips, dtype=model.config.numpy_dtype())
    n = clips.shape[0]
    if n == 0:
        raise ContractError("adaptation requires at least one clip")
    is_cls = model.config.task == TASK_CLASSIFICATION
    if is_cls:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    else:
        labels = [tuple(int(t) for t in seq) for seq in labels]
        if len(labels) != n:
            raise ShapeError(f"label count {len(labels)} != clip count {n}")

    model.set_requires_grad(False)
    model.set_training(False)
    rings = {i: Tensor(r.copy(), requires_grad=True) for i, r in padding.rings.items()}
    history: dict = {"epoch_loss": [], "steps": 0, "stopped_early": False}
    if epochs > 0:
        opt = AdamW([rings[i] for i in sorted(rings)], lr, weight_decay=0.0)
        rng = stable_rng("adapt-order", seed)
        best = np.inf
        stale = 0
        for epoch in range(epochs):
            order = rng.permutation(n)
            tot = 0.0
            for bi, (lo, hi) in enumerate(_batch_ranges(n, batch_size)):
                idx = order[lo:hi]
                if is_cls:
                    loss = task_loss(model, clips[idx], labels[idx], rings)
                else:
                    loss = task_loss(model, clips[idx], [labels[i] for i in idx], rings)
                _check_finite_loss(float(loss.data), epoch, bi)
                ad.backward(loss)
                opt.step()
                opt.zero_grad()
                history["steps"] += 1
                tot += float(loss.data) * (hi - lo)
            epoch_loss = tot / n
            history["epoch_loss"].append(epoch_loss)
            if epoch_loss < best - min_delta:
                best = epoch_loss
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    history["stopped_early"] = True
                    break
    adapted = UserPadding(
        speaker_id=padding.speaker_id,
        config_fingerprint=padding.config_fingerprint,
        rings={i: t.data.copy() for i, t in rings.items()},
    )
    return adapted, history


@dataclass
class PseudoLabelReport:
    """What one self-training round kept, out of how many."""

    total: int
    kept: int
    mean_confidence: float
    precision: float | None = None
    unfiltered_precision: float | None = None


def pseudo_label(
    model: RecognizerModel,
    clips,
    padding=None,
    *,
    threshold: float,
    beam_width: int = 100,
    batch_size: int = 64,
    true_labels=None,
) -> tuple[np.ndarray, list, PseudoLabelReport]:
    """Decode unlabeled clips and keep predictions above the confidence bar.

    Confidence is the max softmax probability for classification and the beam
    confidence (softmax weight of the top surviving hypothesis) for sequence
    models.  When ``true_labels`` is given, the report also carries the
    precision of kept labels and of the unfiltered predictions.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ContractError(f"confidence threshold must lie in [0, 1], got {threshold}")
    was_training = model.training
    model.set_training(False)
    try:
        if model.config.task == TASK_CLASSIFICATION:
            pred, conf = predict_classification(model, clips, padding, batch_size=batch_size)
            predictions: list = list(pred)
        else:
            predictions, conf = predict_sequences(
                model, clips, padding, beam_width=beam_width, batch_size=batch_size
            )
    finally:
        model.set_training(was_training)
    keep = np.nonzero(conf >= threshold)[0]
    kept_labels = [predictions[i] for i in keep]
    precision = unfiltered = None
    if true_labels is not None:
        if model.config.task == TASK_CLASSIFICATION:
            truth: list = [int(t) for t in np.asarray(true_labels)]
        else:
            truth = [tuple(int(x) for x in seq) for seq in true_labels]
        matches = [predictions[i] == truth[i] for i in range(len(truth))]
        unfiltered = float(np.mean(matches)) if matches else None
        if keep.size:
            precision = float(np.mean([matches[i] for i in keep]))
    report = PseudoLabelReport(
        total=len(predictions),
        kept=int(keep.size),
        mean_confidence=float(conf[keep].mean()) if keep.size else 0.0,
        precision=precision,
        unfiltered_precision=unfiltered,
    )
    if model.config.task == TASK_CLASSIFICATION:
        kept_labels = np.asarray(kept_labels, dtype=np.int64)
    return keep, kept_labels, report


def adapt_self_training(
    model: RecognizerModel,
    padding: UserPadding,
    clips,
    *,
    threshold: float | None = None,
    rounds: int = 1,
    lr: float = DEFAULT_ADAPT_LR,
    epochs: int = 30,
    batch_size: int | None = 32,
    patience: int = 5,
    beam_width: int = 100,
    seed: int = 0,
    true_labels=None,
) -> tuple[UserPadding, dict]:
    """Ring adaptation from the model's own confident predictions.

    Each round decodes the unlabeled clips with the current rings, keeps
    predictions whose confidence clears ``threshold`` (default 0.9 for
    sequence models, 0.8 for classification), and runs supervised ring
    adaptation on those pseudo-labels.  ``true_labels``, when given, is used
    only to report pseudo-label precision — never for training.  A round that
    keeps nothing warns and leaves the rings unchanged.
    """
    if rounds < 1:
        raise ContractError(f"self-training needs at least one round, got {rounds}")
    if threshold is None:
        threshold = (
            DEFAULT_CLASSIFICATION_THRESHOLD
            if model.config.task == TASK_CLASSIFICATION
            else DEFAULT_SEQUENCE_THRESHOLD
        )
    check_padding_matches(padding, model)
    current = padding.copy()
    report: dict = {"threshold": float(threshold), "rounds": []}
    for rnd in range(rounds):
        keep, kept_labels, round_report = pseudo_label(
            model,
            clips,
            current,
            threshold=threshold,
            beam_width=beam_width,
            batch_size=batch_size if batch_size is not None else 64,
            true_labels=true_labels,
        )
        report["rounds"].append(round_report)
        if keep.size == 0:
            warnings.warn(
                f"self-training round {rnd}: no predictions reached confidence "
                f"{threshold}; rings left unchanged",
                stacklevel=2,
            )
            continue
        kept_clips = np.asarray(clips, dtype=model.config.numpy_dtype())[keep]
        current, _ = adapt_supervised(
            model,
            current,
            kept_clips,
            kept_labels,
            lr=lr,
            epochs=epochs,
            batch_size=batch_size,
            patience=patience,
            seed=seed + rnd,
        )
    return current, report


# ---------------------------------------------------------------------------
# speaker-code baseline
# ---------------------------------------------------------------------------

CODE_SCHEDULE_SMALL = (128, 64, 32)
CODE_SCHEDULE_LARGE = (256, 128, 64)


@dataclass
class SpeakerCodeAdapter:
    """Conditioning network inserted after the front-end.

    Each frame feature is concatenated with the speaker's code vector and
    pushed through three fully-connected layers whose output is added back to
    the feature (a residual correction).  The last layer starts at zero, so a
    fresh adapter with a zero code behaves exactly like the unadapted model.

    ``dims = (code_dim, hidden1, hidden2)``.
    """

    dims: tuple[int, int, int]
    weights: dict = field(default_factory=dict)
    codes: dict = field(default_factory=dict)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.weights.values())

    def network_parameters(self) -> list[Tensor]:
        return [self.weights[k] for k in sorted(self.weights)]

    def code_for(self, speaker_id: str, dtype) -> Tensor:
        if speaker_id not in self.codes:
            self.codes[speaker_id] = Tensor(np.zeros(self.dims[0], dtype=dtype))
        return self.codes[speaker_id]

    def apply(self, frame_feats: Tensor, code: Tensor) -> Tensor:
        """[N, F] features + one code -> corrected [N, F] features."""
        n = frame_feats.data.shape[0]
        rows = ad.tile_rows(code, n)
        x = ad.concat_lastdim(frame_feats, rows)
        x = ad.relu(ad.add_rowvec(ad.matmul(x, self.weights["w1"]), self.weights["b1"]))
        x = ad.relu(ad.add_rowvec(ad.matmul(x, self.weights["w2"]), self.weights["b2"]))
        delta = ad.add_rowvec(ad.matmul(x, self.weights["w3"]), self.weights["b3"])
        return frame_feats + delta


def new_speaker_code_adapter(
    model: RecognizerModel,
    dims: tuple[int, int, int] = CODE_SCHEDULE_SMALL,
    seed: int = 0,
) -> SpeakerCodeAdapter:
    code_dim, h1, h2 = dims
    if min(code_dim, h1, h2) < 1:
        raise ContractError(f"adapter dims must be positive, got {dims}")
    f = model.feature_dim
    dt = model.config.numpy_dtype()
    rng = stable_rng("speaker-code-adapter", seed)

    def layer(n_in: int, n_out: int) -> Tensor:
        scale = 1.0 / np.sqrt(n_in)
        return Tensor(rng.uniform(-scale, scale, size=(n_in, n_out)).astype(dt))

    weights = {
        "w1": layer(f + code_dim, h1),
        "b1": Tensor(np.zeros(h1, dtype=dt)),
        "w2": layer(h1, h2),
        "b2": Tensor(np.zeros(h2, dtype=dt)),
        # zero last layer: the residual correction starts as the identity
        "w3": Tensor(np.zeros((h2, f), dtype=dt)),
        "b3": Tensor(np.zeros(f, dtype=dt)),
    }
    return SpeakerCodeAdapter(dims=tuple(int(d) for d in dims), weights=weights)


def forward_with_code(model: RecognizerModel, adapter: SpeakerCodeAdapter, clips, code: Tensor) -> Tensor:
    """Logits for a single-speaker batch routed through the code adapter."""
    x = _as_clip_tensor(model, clips)
    b, t = x.data.shape[0], x.data.shape[1]
    flat = ad.reshape(x, (b * t,) + x.data.shape[2:])
    feats = model.frontend_features(flat)
    feats = adapter.apply(feats, code)
    return model.backend_head(ad.reshape(feats, (b, t, model.feature_dim)))


def _code_task_loss(model, adapter, clips, labels, code) -> Tensor:
    logits = forward_with_code(model, adapter, clips, code)
    if model.config.task == TASK_CLASSIFICATION:
        return cross_entropy_batch(logits, labels)
    return ctc_loss_batch(ad.log_softmax_lastdim(logits), labels)


def train_speaker_code(
    model: RecognizerModel,
    adapter: SpeakerCodeAdapter,
    clips,
    labels,
    speakers,
    *,
    lr: float = DEFAULT_PRETRAIN_LR,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
) -> dict:
    """Stage two: train the adapter network and training-speaker codes.

    The recognizer itself stays frozen.  Batches are drawn within one speaker
    at a time, since a batch shares one code vector.  Requires speaker labels
    for the training data — the key contrast with ring adaptation, which
    needs none.
    """
    clips = np.asarray(clips, dtype=model.config.numpy_dtype())
    n = clips.shape[0]
    speakers = list(speakers)
    if len(speakers) != n:
        raise ShapeError(f"speaker label count {len(speakers)} != clip count {n}")
    is_cls = model.config.task == TASK_CLASSIFICATION
    if is_cls:
        labels = np.asarray(labels, dtype=np.int64)
    else:
        labels = [tuple(int(t) for t in seq) for seq in labels]
    model.set_requires_grad(False)
    model.set_training(False)
    dt = model.config.numpy_dtype()
    by_speaker: dict = {}
    for i, s in enumerate(speakers):
        by_speaker.setdefault(s, []).append(i)
    for s in by_speaker:
        by_speaker[s] = np.asarray(by_speaker[s], dtype=np.int64)
        adapter.code_for(s, dt)
    params = adapter.network_parameters() + [adapter.codes[s] for s in sorted(by_speaker)]
    for p in params:
        p.requires_grad = True
    opt = AdamW(params, lr, weight_decay=0.0)
    rng = stable_rng("speaker-code-order", seed)
    history: dict = {"epoch_loss": [], "steps": 0}
    for epoch in range(epochs):
        chunks = []
        for s in sorted(by_speaker):
            idx = by_speaker[s][rng.permutation(len(by_speaker[s]))]
            chunks += [(s, idx[lo:hi]) for lo, hi in _batch_ranges(len(idx), batch_size)]
        order = rng.permutation(len(chunks))
        tot = 0.0
        for bi in order:
            s, idx = chunks[bi]
            yb = labels[idx] if is_cls else [labels[i] for i in idx]
            loss = _code_task_loss(model, adapter, clips[idx], yb, adapter.codes[s])
            _check_finite_loss(float(loss.data), epoch, int(bi))
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            history["steps"] += 1
            tot += float(loss.data) * len(idx)
        history["epoch_loss"].append(tot / n)
    for p in params:
        p.requires_grad = False
        p.grad = None
    return history


def adapt_speaker_code(
    model: RecognizerModel,
    adapter: SpeakerCodeAdapter,
    clips,
    labels,
    speaker_id: str,
    *,
    lr: float = DEFAULT_ADAPT_LR,
    epochs: int = 30,
    batch_size: int | None = 32,
    patience: int = 5,
    min_delta: float = 1e-4,
    seed: int = 0,
) -> tuple[Tensor, dict]:
    """Stage three: enroll a new speaker by training only their code vector.

    Presumes a stage-two-trained adapter: while the adapter's last layer is
    still at its zero initialization, features are insensitive to the code
    and this stage cannot make progress.
    """
    clips = np.asarray(clips, dtype=model.config.numpy_dtype())
    n = clips.shape[0]
    if n == 0:
        raise ContractError("adaptation requires at least one clip")
    is_cls = model.config.task == TASK_CLASSIFICATION
    if is_cls:
        labels = np.asarray(labels, dtype=np.int64)
    else:
        labels = [tuple(int(t) for t in seq) for seq in labels]
    model.set_requires_grad(False)
    model.set_training(False)
    for p in adapter.network_parameters():
        p.requires_grad = False
        p.grad = None
    code = adapter.code_for(speaker_id, model.config.numpy_dtype())
    code.requires_grad = True
    opt = AdamW([code], lr, weight_decay=0.0)
    rng = stable_rng("speaker-code-adapt", seed)
    history: dict = {"epoch_loss": [], "steps": 0, "stopped_early": False}
    best = np.inf
    stale = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        tot = 0.0
        for bi, (lo, hi) in enumerate(_batch_ranges(n, batch_size)):
            idx = order[lo:hi]
            yb = labels[idx] if is_cls else [labels[i] for i in idx]
            loss = _code_task_loss(model, adapter, clips[idx], yb, code)
            _check_finite_loss(float(loss.data), epoch, bi)
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            history["steps"] += 1
            tot += float(loss.data) * (hi - lo)
        epoch_loss = tot / n
        history["epoch_loss"].append(epoch_loss)
        if epoch_loss < best - min_delta:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                history["stopped_early"] = True
                break
    code.requires_grad = False
    code.grad = None
    return code, history
