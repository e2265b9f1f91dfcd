"""Cutoff-table evaluation, context-strategy ablation, attention summaries.

A :class:`MetricsReport` holds one row per cutoff with the five headline
metrics plus bookkeeping (patient count, skipped AUC labels), serialized as
both an aligned text table and canonical JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from lahst.data import CATEGORIES, CutoffSpec, ValidationError, chunk_stay, truncate_to_cutoff
from lahst.inference import eca_infer, predict_at_cutoff
from lahst.metrics import macro_auc, macro_f1, micro_auc, micro_f1, per_label_auc, precision_at_k
from lahst.model import LahstParams
from lahst.training import broadcast_targets, last_chunks, sample_subsequence


@dataclass
class CutoffRow:
    cutoff: str
    micro_f1: float
    macro_f1: float
    micro_auc: float | None
    macro_auc: float | None
    p_at_k: float
    n_patients: int
    auc_labels_skipped: int

    def to_dict(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "micro_auc": self.micro_auc,
            "macro_auc": self.macro_auc,
            "p_at_k": self.p_at_k,
            "n_patients": self.n_patients,
            "auc_labels_skipped": self.auc_labels_skipped,
        }


@dataclass
class MetricsReport:
    rows: list
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        headers = ["cutoff", "micro-f1", "macro-f1", "micro-auc", "macro-auc", "p@k", "patients"]
        lines = ["  ".join(f"{h:>10}" for h in headers)]

        def fmt(v):
            return "     -    " if v is None else f"{100 * v:10.2f}"

        for r in self.rows:
            cells = [
                f"{r.cutoff:>10}",
                fmt(r.micro_f1),
                fmt(r.macro_f1),
                fmt(r.micro_auc),
                fmt(r.macro_auc),
                fmt(r.p_at_k),
                f"{r.n_patients:10d}",
            ]
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, json_path, table_path=None) -> None:
        with open(json_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_json())
        if table_path is not None:
            with open(table_path, "w", encoding="utf-8", newline="\n") as f:
                f.write(self.to_table())

    def row(self, cutoff_label: str) -> CutoffRow:
        for r in self.rows:
            if r.cutoff == cutoff_label:
                return r
        raise KeyError(cutoff_label)


def score_matrix(stays, params: LahstParams, cutoff: CutoffSpec, n_max: int,
                 causal_scope: str = "window-local"):
    """(P, L) probabilities and gold matrix for a corpus at one cutoff."""
    n_labels = params.config.n_labels
    scores = np.zeros((len(stays), n_labels))
    gold = np.zeros((len(stays), n_labels))
    for i, stay in enumerate(stays):
        scores[i] = predict_at_cutoff(stay, cutoff, params, n_max, causal_scope=causal_scope)
        gold[i] = broadcast_targets(stay.labels, 1, n_labels)[0]
    return scores, gold


def evaluate_at_cutoffs(
    stays,
    params: LahstParams,
    cutoffs,
    n_max: int,
    threshold: float = 0.5,
    k: int = 5,
    causal_scope: str = "window-local",
    meta: dict | None = None,
) -> MetricsReport:
    """All five metrics per cutoff over a corpus."""
    if not stays:
        raise ValidationError("empty evaluation corpus")
    rows = []
    for cutoff in cutoffs:
        scores, gold = score_matrix(stays, params, cutoff, n_max, causal_scope)
        skipped = sum(1 for v in per_label_auc(scores, gold) if v is None)
        rows.append(
            CutoffRow(
                cutoff=cutoff.label,
                micro_f1=micro_f1(scores, gold, threshold),
                macro_f1=macro_f1(scores, gold, threshold),
                micro_auc=micro_auc(scores, gold),
                macro_auc=macro_auc(scores, gold),
                p_at_k=precision_at_k(scores, gold, k),
                n_patients=len(stays),
                auc_labels_skipped=skipped,
            )
        )
    report_meta = {"threshold": threshold, "k": k, "n_max": n_max, "causal_scope": causal_scope}
    if meta:
        report_meta.update(meta)
    return MetricsReport(rows=rows, meta=report_meta)


STRATEGIES = ("last", "random", "eca")


def context_strategy_ablation(
    stays,
    params: LahstParams,
    cutoffs,
    n_max: int,
    threshold: float = 0.5,
    seed: int = 0,
) -> dict:
    """Micro-F1 per cutoff for last-n / random-n / full extended context.

    "last" truncates the available sequence to its most recent n_max
    chunks; "random" samples n_max chunks (seeded per stay); "eca" runs
    windowed inference over everything available.
    """
    n_labels = params.config.n_labels
    grid: dict = {}
    for cutoff in cutoffs:
        per_strategy: dict = {}
        for strategy in STRATEGIES:
            scores = np.zeros((len(stays), n_labels))
            gold = np.zeros((len(stays), n_labels))
            for i, stay in enumerate(stays):
                seq = truncate_to_cutoff(chunk_stay(stay, params.config.chunk_tokens), cutoff)
                gold[i] = broadcast_targets(stay.labels, 1, n_labels)[0]
                if len(seq) == 0:
                    from lahst.inference import fallback_prior

                    scores[i] = fallback_prior(params)
                    continue
                if strategy == "last":
                    view = last_chunks(seq, n_max)
                elif strategy == "random":
                    rng = np.random.default_rng([seed, i])
                    view = sample_subsequence(seq, n_max, rng)
                else:
                    view = seq
                scores[i] = eca_infer(view, params, n_max).final_row()
            per_strategy[strategy] = micro_f1(scores, gold, threshold)
        grid[cutoff.label] = per_strategy
    return grid


@dataclass
class CategoryAttention:
    category: str
    mean_weight: float
    std: float
    n: int

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "mean_weight": self.mean_weight,
            "std": self.std,
            "n": self.n,
        }


def attention_summary(traces) -> list:
    """Per-category label-attention mass at each trace's final position,
    averaged across heads, labels and stays.

    Under uniform attention a category's mean equals its chunk-count share.
    """
    per_stay = []
    for trace in traces:
        per_stay.append(trace.final_position_category_mass())
    rows = []
    for category in CATEGORIES:
        values = np.array([mass[category] for mass in per_stay])
        rows.append(
            CategoryAttention(
                category=category,
                mean_weight=float(values.mean()) if len(values) else 0.0,
                std=float(values.std()) if len(values) else 0.0,
                n=len(values),
            )
        )
    return rows


def collect_attention_summary(
    stays,
    params: LahstParams,
    cutoff: CutoffSpec,
    n_max: int,
    causal_scope: str = "window-local",
):
    """Run traced inference at a cutoff and aggregate; returns (rows, skipped)."""
    traces = []
    skipped = 0
    for stay in stays:
        seq = truncate_to_cutoff(chunk_stay(stay, params.config.chunk_tokens), cutoff)
        if len(seq) == 0:
            skipped += 1
            continue
        _, trace = eca_infer(seq, params, n_max, causal_scope=causal_scope, record_trace=True)
        traces.append(trace)
    return attention_summary(traces), skipped


def write_attention_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("category,mean_weight,std,n\n")
        for r in rows:
            f.write(f"{r.category},{r.mean_weight!r},{r.std!r},{r.n}\n")
