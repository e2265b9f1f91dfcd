"""Synthetic EHR corpus with planted label signals.

Each label owns a disjoint block of signal tokens. Routine notes (Nursing,
Physician, Respiratory, Other) are noise. Diagnostic notes (ECG, Echo,
Radiology) reveal each of the stay's gold labels with a probability that
ramps linearly over the stay, so early inputs carry genuinely less
evidence than late ones. The single terminal discharge summary contains
signal tokens for every gold label mixed with noise.

Generation is a pure function of (config, seed): every stay draws from its
own child generator, so per-patient work could be parallelized without
changing the output, and reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from lahst.data import (
    CATEGORIES,
    DIAGNOSTIC_CATEGORIES,
    DISCHARGE,
    Note,
    PatientStay,
    ValidationError,
)

_BASE_ADMISSION = datetime(2020, 1, 1, 0, 0)

_DEFAULT_RATES = {
    "Nursing": 3.0,
    "Physician": 1.0,
    "Radiology": 0.8,
    "ECG": 0.7,
    "Echo": 0.5,
    "Respiratory": 0.3,
    "Other": 0.2,
}


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 400
    n_labels: int = 20
    n_patients: int = 250
    labels_per_stay: tuple = (2, 4)  # inclusive range of gold-set sizes
    signal_tokens_per_label: int = 8
    stay_days: tuple = (4.0, 12.0)
    notes_per_day: dict = field(default_factory=lambda: dict(_DEFAULT_RATES))
    note_tokens: tuple = (24, 40)  # noise tokens per routine note
    signal_run: tuple = (5, 9)  # signal tokens emitted per revealed label
    reveal_ramp: tuple = (0.2, 0.8)  # reveal probability at admission / pre-discharge
    ds_signal_run: tuple = (8, 12)  # discharge-summary signal tokens per gold label
    ds_noise_tokens: tuple = (16, 32)

    def validate(self) -> None:
        if self.n_labels < 1 or self.n_labels > 50:
            raise ValidationError(f"label count {self.n_labels} outside [1, 50]")
        if self.n_labels > self.vocab_size / 4:
            raise ValidationError(
                f"label count {self.n_labels} too large for vocabulary {self.vocab_size}"
            )
        if self.n_labels * self.signal_tokens_per_label >= self.vocab_size:
            raise ValidationError("signal blocks exhaust the vocabulary, no noise tokens left")
        if not self.notes_per_day:
            raise ValidationError("notes_per_day must name at least one category")
        for cat in self.notes_per_day:
            if cat not in CATEGORIES or cat == DISCHARGE:
                raise ValidationError(f"bad note-rate category {cat!r}")
        lo, hi = self.labels_per_stay
        if not 1 <= lo <= hi <= self.n_labels:
            raise ValidationError(f"labels_per_stay range {self.labels_per_stay} invalid")
        if self.n_patients < 1:
            raise ValidationError("need at least one patient")

    def signal_block(self, label: int) -> np.ndarray:
        k = self.signal_tokens_per_label
        return np.arange(label * k, (label + 1) * k, dtype=np.int64)

    @property
    def noise_start(self) -> int:
        return self.n_labels * self.signal_tokens_per_label

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_labels": self.n_labels,
            "n_patients": self.n_patients,
            "labels_per_stay": list(self.labels_per_stay),
            "signal_tokens_per_label": self.signal_tokens_per_label,
            "stay_days": list(self.stay_days),
            "notes_per_day": dict(sorted(self.notes_per_day.items())),
            "note_tokens": list(self.note_tokens),
            "signal_run": list(self.signal_run),
            "reveal_ramp": list(self.reveal_ramp),
            "ds_signal_run": list(self.ds_signal_run),
            "ds_noise_tokens": list(self.ds_noise_tokens),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        kwargs = dict(d)
        for key in ("labels_per_stay", "stay_days", "note_tokens", "signal_run",
                    "reveal_ramp", "ds_signal_run", "ds_noise_tokens"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _noise(rng, config: SynthConfig, count: int) -> list:
    return rng.integers(config.noise_start, config.vocab_size, size=count).tolist()


def _signal(rng, config: SynthConfig, label: int, count: int) -> list:
    return rng.choice(config.signal_block(label), size=count, replace=True).tolist()


def _minute(dt: datetime) -> datetime:
    return dt.replace(second=0, microsecond=0)


def _generate_stay(config: SynthConfig, seed: int, index: int) -> PatientStay:
    rng = np.random.default_rng([seed, index])
    stay_id = f"stay-{index:05d}"
    admission = _BASE_ADMISSION + timedelta(days=index)
    duration_h = rng.uniform(config.stay_days[0], config.stay_days[1]) * 24.0

    lo, hi = config.labels_per_stay
    n_gold = int(rng.integers(lo, hi + 1))
    gold = np.sort(rng.choice(config.n_labels, size=n_gold, replace=False))

    ramp_lo, ramp_hi = config.reveal_ramp
    events = []  # (offset hours, category, tokens)
    for category in CATEGORIES:
        if category == DISCHARGE:
            continue
        rate = config.notes_per_day.get(category, 0.0)
        count = int(rng.poisson(rate * duration_h / 24.0))
        for _ in range(count):
            # strictly before the discharge summary
            offset = float(rng.uniform(0.0, duration_h * 0.98))
            frac = offset / duration_h
            tokens = _noise(rng, config, int(rng.integers(*config.note_tokens)))
            if category in DIAGNOSTIC_CATEGORIES:
                reveal_p = ramp_lo + (ramp_hi - ramp_lo) * frac
                for label in gold:
                    if rng.uniform() < reveal_p:
                        run = int(rng.integers(*config.signal_run))
                        tokens.extend(_signal(rng, config, int(label), run))
            events.append((offset, category, tokens))

    ds_tokens = _noise(rng, config, int(rng.integers(*config.ds_noise_tokens)))
    for label in gold:
        run = int(rng.integers(*config.ds_signal_run))
        ds_tokens.extend(_signal(rng, config, int(label), run))
    events.append((duration_h, DISCHARGE, ds_tokens))

    events.sort(key=lambda e: e[0])
    notes = tuple(
        Note(
            note_id=f"{stay_id}-n{j:03d}",
            category=category,
            timestamp=_minute(admission + timedelta(hours=offset)),
            tokens=tuple(tokens),
        )
        for j, (offset, category, tokens) in enumerate(events)
    )
    return PatientStay(
        stay_id=stay_id,
        admission_time=admission,
        notes=notes,
        labels=frozenset(int(l) for l in gold),
    )


def generate_corpus(config: SynthConfig, seed: int):
    """Deterministically generate ``config.n_patients`` stays."""
    config.validate()
    return [_generate_stay(config, seed, i) for i in range(config.n_patients)]


def split_by_hash(stays, fractions=(0.8, 0.1, 0.1)):
    """Deterministic (train, dev, test) split keyed on hashed stay ids.

    Ordering stays by the SHA-256 of their id and slicing gives exact split
    sizes (within rounding) that do not depend on generation order.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions {fractions} do not sum to 1")
    ranked = sorted(stays, key=lambda s: hashlib.sha256(s.stay_id.encode()).hexdigest())
    n = len(ranked)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    train = ranked[:n_train]
    dev = ranked[n_train : n_train + n_dev]
    test = ranked[n_train + n_dev :]
    # restore stay-id order inside each split
    key = lambda s: s.stay_id
    return sorted(train, key=key), sorted(dev, key=key), sorted(test, key=key)


def label_prior(stays, n_labels: int) -> np.ndarray:
    """Empirical per-label frequency across a corpus."""
    counts = np.zeros(n_labels, dtype=np.float64)
    for stay in stays:
        for l in stay.labels:
            counts[l] += 1.0
    return counts / max(len(stays), 1)
