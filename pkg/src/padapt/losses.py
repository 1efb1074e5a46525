"""Training losses and sequence decoding.

CTC follows the standard blank-augmented trellis: label index 0 is the blank,
real tokens are 1..V-1, and a frame-label path collapses by merging repeats
then dropping blanks.  The loss is a custom graph op whose backward uses the
exact alpha/beta recursions, all in log space.

Rows of a log-probability table are expected to be log-softmax outputs; the
loss itself treats every entry as a free variable, which keeps its gradient
well-defined under finite-difference probing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

BLANK = 0

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# Cross-entropy
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of ``target`` for one logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got {logits.data.shape}")
    v = logits.data.shape[0]
    if not (0 <= int(target) < v):
        raise ContractError(f"target {target} out of range for vocab {v}")
    row = ad.reshape(logits, (1, v))
    picked = ad.gather_rows(ad.log_softmax_lastdim(row), np.array([int(target)]))
    return ad.reshape(ad.neg(ad.sum_all(picked)), ())


def cross_entropy_batch(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over [N, V] logits."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_batch expects [N, V], got {logits.data.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.data.shape[0],):
        raise ShapeError("cross_entropy_batch: one target per row required")
    picked = ad.gather_rows(ad.log_softmax_lastdim(logits), targets)
    return ad.neg(ad.mean_all(picked))


# ---------------------------------------------------------------------------
# CTC loss
# ---------------------------------------------------------------------------


def _validate_target(target: Sequence[int], vocab: int) -> tuple[int, ...]:
    tgt = tuple(int(c) for c in target)
    for c in tgt:
        if not (1 <= c < vocab):
            raise ContractError(f"CTC target token {c} outside 1..{vocab - 1} (0 is the blank)")
    return tgt


def min_frames_for(target: Sequence[int]) -> int:
    """Shortest path length that can emit the target: its length plus one
    separating blank per adjacent repeat."""
    tgt = tuple(target)
    repeats = sum(1 for a, b in zip(tgt, tgt[1:]) if a == b)
    return len(tgt) + repeats


def _ctc_forward_backward(lp: np.ndarray, tgt: tuple[int, ...]):
    """Returns (loss, grad wrt lp) via log-space alpha/beta recursions."""
    t_len, vocab = lp.shape
    z = [BLANK]
    for c in tgt:
        z += [c, BLANK]
    s_len = len(z)
    z_arr = np.array(z)
    # skip transition allowed into s when z[s] is a label differing from z[s-2]
    can_skip = np.zeros(s_len, dtype=bool)
    for s in range(2, s_len):
        can_skip[s] = z[s] != BLANK and z[s] != z[s - 2]

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, z[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, z[1]]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        prev1 = np.concatenate(([NEG_INF], alpha[t - 1]))[:s_len]
        prev2 = np.concatenate(([NEG_INF, NEG_INF], alpha[t - 1]))[:s_len]
        prev2 = np.where(can_skip, prev2, NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(stay, prev1), prev2) + lp[t, z_arr]

    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail = np.logaddexp(tail, alpha[t_len - 1, s_len - 2])
    log_p = tail
    if not np.isfinite(log_p):
        raise ContractError("CTC target has no feasible alignment for this length")

    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = lp[t_len - 1, z[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = lp[t_len - 1, z[s_len - 2]]
    # skip transition out of s goes to s+2 when z[s+2] is a label != z[s]
    can_skip_fwd = np.zeros(s_len, dtype=bool)
    can_skip_fwd[: s_len - 2] = can_skip[2:]
    for t in range(t_len - 2, -1, -1):
        stay = beta[t + 1]
        padded = np.concatenate((beta[t + 1], [NEG_INF, NEG_INF]))
        nxt1 = padded[1 : 1 + s_len]
        nxt2 = np.where(can_skip_fwd, padded[2 : 2 + s_len], NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, nxt1), nxt2) + lp[t, z_arr]

    # mass through state (t, s); alpha and beta both include lp[t, z[s]]
    gamma = alpha + beta - lp[:, z_arr]
    grad = np.zeros_like(lp)
    for s in range(s_len):
        k = z[s]
        with np.errstate(over="ignore"):
            grad[:, k] = grad[:, k] - np.exp(gamma[:, s] - log_p)
    return -float(log_p), grad


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """-log P(target | log_probs) for one [T, V] table (V includes the blank)."""
    if log_probs.data.ndim != 2:
        raise ShapeError(f"ctc_loss expects [T, V], got {log_probs.data.shape}")
    t_len, vocab = log_probs.data.shape
    if vocab < 2:
        raise ShapeError("ctc_loss needs the blank plus at least one token")
    tgt = _validate_target(target, vocab)
    if min_frames_for(tgt) > t_len:
        raise ContractError(
            f"CTC target needs at least {min_frames_for(tgt)} frames, table has {t_len}"
        )
    loss_val, grad = _ctc_forward_backward(log_probs.data.astype(np.float64), tgt)

    def bwd(g: np.ndarray):
        return ((g * grad).astype(log_probs.data.dtype),)

    return ad._make(np.asarray(loss_val, dtype=log_probs.data.dtype), (log_probs,), bwd)


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean CTC loss over a [B, T, V] batch."""
    if log_probs.data.ndim != 3:
        raise ShapeError(f"ctc_loss_batch expects [B, T, V], got {log_probs.data.shape}")
    b = log_probs.data.shape[0]
    if len(targets) != b:
        raise ShapeError("ctc_loss_batch: one target per clip required")
    t_len, vocab = log_probs.data.shape[1:]
    tgts = [_validate_target(t, vocab) for t in targets]
    for tgt in tgts:
        if min_frames_for(tgt) > t_len:
            raise ContractError(
                f"CTC target needs at least {min_frames_for(tgt)} frames, table has {t_len}"
            )
    losses = np.zeros(b)
    grads = np.zeros_like(log_probs.data, dtype=np.float64)
    for i in range(b):
        losses[i], grads[i] = _ctc_forward_backward(log_probs.data[i].astype(np.float64), tgts[i])

    def bwd(g: np.ndarray):
        return ((g * grads / b).astype(log_probs.data.dtype),)

    return ad._make(np.asarray(losses.mean(), dtype=log_probs.data.dtype), (log_probs,), bwd)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def collapse_path(path: Sequence[int]) -> tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for s in path:
        if s != prev and s != BLANK:
            out.append(int(s))
        prev = s
    return tuple(out)


def greedy_decode(log_probs: np.ndarray) -> tuple[int, ...]:
    lp = np.asarray(log_probs)
    if lp.ndim != 2:
        raise ShapeError(f"greedy_decode expects [T, V], got {lp.shape}")
    return collapse_path(np.argmax(lp, axis=1))


@dataclass(frozen=True)
class BeamHypothesis:
    """A collapsed prefix with its blank-/non-blank-terminated path masses."""

    tokens: tuple[int, ...]
    log_prob_blank: float
    log_prob_nonblank: float

    @property
    def log_prob(self) -> float:
        return float(np.logaddexp(self.log_prob_blank, self.log_prob_nonblank))


def beam_decode(log_probs: np.ndarray, beam_width: int = 100) -> list[BeamHypothesis]:
    """Prefix beam search over a [T, V] log-probability table.

    Keeps, per collapsed prefix, the path mass ending in blank and the mass
    ending in the prefix's last token; exact when beam_width exceeds the
    number of distinct prefixes alive at every step.  Returns surviving
    hypotheses sorted by total mass (best first, ties broken by token tuple).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ShapeError(f"beam_decode expects [T, V], got {lp.shape}")
    if beam_width < 1:
        raise ContractError("beam_width must be positive")
    t_len, vocab = lp.shape

    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(t_len):
        nxt: dict[tuple[int, ...], tuple[float, float]] = {}

        def bump(prefix, blank_mass, nonblank_mass):
            pb, pn = nxt.get(prefix, (NEG_INF, NEG_INF))
            nxt[prefix] = (np.logaddexp(pb, blank_mass), np.logaddexp(pn, nonblank_mass))

        for prefix, (pb, pn) in beams.items():
            total = np.logaddexp(pb, pn)
            bump(prefix, total + lp[t, BLANK], NEG_INF)
            for c in range(1, vocab):
                p = lp[t, c]
                if prefix and prefix[-1] == c:
                    # repeat without blank keeps the prefix; after a blank it
                    # starts a new occurrence
                    bump(prefix, NEG_INF, pn + p)
                    bump(prefix + (c,), NEG_INF, pb + p)
                else:
                    bump(prefix + (c,), NEG_INF, total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
        beams = dict(ranked[:beam_width])

    hyps = [BeamHypothesis(tokens=pfx, log_prob_blank=pb, log_prob_nonblank=pn) for pfx, (pb, pn) in beams.items()]
    hyps.sort(key=lambda h: (-h.log_prob, h.tokens))
    return hyps


def beam_confidence(hypotheses: Sequence[BeamHypothesis]) -> float:
    """Softmax weight of the best hypothesis among the surviving beams.

    One surviving beam gives 1.0; adding a constant to every mass changes
    nothing.  Used as the keep/drop score for pseudo-labels.
    """
    if not hypotheses:
        raise ContractError("beam_confidence needs at least one hypothesis")
    masses = np.array([h.log_prob for h in hypotheses])
    top = masses.max()
    weights = np.exp(masses - top)
    return float(weights[int(np.argmax(masses))] / weights.sum())


# ---------------------------------------------------------------------------
# Edit distance / WER
# ---------------------------------------------------------------------------


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance between two token sequences."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[len(b)]


def word_error_rate(references: Sequence[Sequence[int]], hypotheses: Sequence[Sequence[int]]) -> float:
    """Corpus-level WER: total edit distance over total reference length."""
    if len(references) != len(hypotheses):
        raise ShapeError("word_error_rate: reference/hypothesis count mismatch")
    total_len = sum(len(r) for r in references)
    if total_len == 0:
        raise ContractError("word_error_rate: empty reference corpus")
    total_edits = sum(edit_distance(r, h) for r, h in zip(references, hypotheses))
    return total_edits / total_len
