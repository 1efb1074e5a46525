"""Session fixtures shared by the trend and acceptance tests.

The reference corpus and the pretrained recognizers cost minutes of CPU, so
they are built once per session.  Everything is fully seeded: repeated
sessions produce bitwise-identical models and therefore identical downstream
numbers.  Fixtures that feed runtime-bounded checks return a ``Timed``
wrapper so each check can charge itself for everything it consumed, even
when a fixture is shared between several tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from padapt import (
    DataConfig,
    build_model,
    generate,
    pretrain,
    standard_config,
    train_speaker_invariant,
)
from padapt import harness
from padapt.model import TASK_CTC

_ACCEPTANCE_LINES: list = []


@dataclass
class Timed:
    """A fixture value plus the seconds it took to build."""

    value: object
    seconds: float


def _timed(fn) -> Timed:
    t0 = time.perf_counter()
    value = fn()
    return Timed(value, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def acceptance_log() -> list:
    """Collector for the one-line verdicts echoed after the run."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance summary")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def reference_split() -> Timed:
    """Default classification corpus: 8 training speakers, 2 held out."""
    return _timed(lambda: generate(DataConfig()))


@pytest.fixture(scope="session")
def reference_model(reference_split: Timed) -> Timed:
    """Stock full-preset recognizer pretrained on the training speakers."""

    def build():
        split = reference_split.value
        model = build_model(
            standard_config(vocab_size=split.config.vocab_size, dtype="f32")
        )
        pretrain(model, split.train.clips, split.train.labels, **harness.REFERENCE_PRETRAIN)
        return model

    return _timed(build)


@pytest.fixture(scope="session")
def sequence_split() -> Timed:
    """Token-sequence corpus with the mismatch scaled for label-free work."""
    return _timed(lambda: generate(harness.mild_mismatch_config()))


@pytest.fixture(scope="session")
def sequence_model(sequence_split: Timed) -> Timed:
    """Sequence recognizer pretrained on the training speakers."""

    def build():
        split = sequence_split.value
        model = build_model(
            standard_config(
                task=TASK_CTC, vocab_size=split.config.vocab_size, dtype="f32"
            )
        )
        pretrain(
            model, split.train.clips, split.train.labels,
            **harness.REFERENCE_PRETRAIN_SEQUENCE,
        )
        return model

    return _timed(build)


@pytest.fixture(scope="session")
def invariant_model(reference_split: Timed):
    """Recognizer pretrained with the adversarial speaker head."""
    split = reference_split.value
    model = build_model(
        standard_config(vocab_size=split.config.vocab_size, dtype="f32")
    )
    train_speaker_invariant(
        model, split.train.clips, split.train.labels, split.train.speakers,
        grl_weight=harness.REFERENCE_GRL_WEIGHT, **harness.REFERENCE_PRETRAIN,
    )
    return model


@pytest.fixture(scope="session")
def sweep_outcome(reference_model: Timed, reference_split: Timed) -> dict:
    """Preset-by-budget adaptation sweep over the held-out speakers.

    Runs the default three presets x three budgets x five folds on the
    reference model, one preset row at a time so each row's cost is known.
    Returns the pooled records, the per-cell mean grid, the baseline records,
    and the seconds spent per row.
    """
    model = reference_model.value
    split = reference_split.value
    t0 = time.perf_counter()
    baseline = harness.baseline_records(model, split)
    baseline_seconds = time.perf_counter() - t0
    records: list = []
    grid: dict = {}
    row_seconds: dict = {}
    for preset in harness.DEFAULT_PRESETS:
        t0 = time.perf_counter()
        recs, cells = harness.ablation_grid(
            model, split, presets=(preset,), minutes=harness.DEFAULT_MINUTES, folds=5
        )
        row_seconds[preset] = time.perf_counter() - t0
        records.extend(recs)
        grid.update(cells)
    return {
        "baseline": baseline,
        "records": records,
        "grid": grid,
        "row_seconds": row_seconds,
        "baseline_seconds": baseline_seconds,
    }
