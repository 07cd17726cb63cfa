"""Continual-learning metrics over a stage x modality x dataset score grid.

Scores S[m][i][n] exist only for i <= m (dataset n of modality i, evaluated
after training stage m). Forgetting compares the current score against the
best score any earlier stage achieved; transfer reads the diagonal. Negative
forgetting is meaningful (backward transfer) and is never clipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ContractError, IncompleteMatrixError

DOMAINS = ("in_domain", "out_of_domain")


@dataclass
class ScoreMatrix:
    """Dense lower-triangular score grid with per-dataset domain tags."""

    stages: list            # stage names, index = m
    modalities: list        # [{"name": str, "datasets": [{"name","domain"}]}]
    scores: list            # scores[m][i][n] for i <= m

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def n_datasets(self, i: int) -> int:
        return len(self.modalities[i]["datasets"])

    def dataset_name(self, i: int, n: int) -> str:
        return self.modalities[i]["datasets"][n]["name"]

    def domain(self, i: int, n: int) -> str:
        return self.modalities[i]["datasets"][n]["domain"]

    def dataset_index(self, name: str) -> tuple[int, int]:
        for i, mod in enumerate(self.modalities):
            for n, ds in enumerate(mod["datasets"]):
                if ds["name"] == name:
                    return i, n
        raise ContractError(f"unknown dataset {name!r}")

    def get(self, m: int, i: int, n: int) -> float:
        if not 0 <= m < self.n_stages:
            raise IncompleteMatrixError(f"stage {m} out of range")
        if not 0 <= i <= m:
            raise IncompleteMatrixError(f"S[{m}][{i}] undefined: modality learned after stage {m}")
        try:
            v = self.scores[m][i][n]
        except (IndexError, TypeError):
            raise IncompleteMatrixError(f"missing score S[m={m}][i={i}][n={n}]") from None
        if v is None or not math.isfinite(v):
            raise IncompleteMatrixError(f"score S[m={m}][i={i}][n={n}] is {v!r}")
        return float(v)

    def filtered(self, i: int, domain: str | None) -> list[int]:
        """Dataset indices of modality i matching the domain filter."""
        if domain is not None and domain not in DOMAINS:
            raise ContractError(f"domain filter must be one of {DOMAINS} or None")
        idx = [n for n in range(self.n_datasets(i))
               if domain is None or self.domain(i, n) == domain]
        return idx

    # --- serialization ---

    def to_json(self) -> str:
        doc = {
            "format": "pathweave-scores",
            "version": 1,
            "stages": self.stages,
            "modalities": self.modalities,
            "scores": self.scores,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScoreMatrix":
        doc = json.loads(text)
        if doc.get("format") != "pathweave-scores":
            raise ContractError("not a score-matrix document")
        sm = cls(doc["stages"], doc["modalities"], doc["scores"])
        if len(sm.scores) != sm.n_stages:
            raise ContractError("scores/stages length mismatch")
        for m, row in enumerate(sm.scores):
            if len(row) != m + 1:
                raise ContractError(f"stage {m} must hold exactly {m + 1} modality rows")
        return sm

    @classmethod
    def empty(cls, stages: list, modalities: list) -> "ScoreMatrix":
        scores = [[[None] * len(modalities[i]["datasets"]) for i in range(m + 1)]
                  for m in range(len(stages))]
        return cls(list(stages), modalities, scores)


def _best_before(sm: ScoreMatrix, m: int, i: int, n: int) -> float:
    """max over earlier stages of the dataset's score (defined entries only)."""
    return max(sm.get(j, i, n) for j in range(i, m))


def forgetting_after_stage(sm: ScoreMatrix, m: int, domain: str | None = None) -> float:
    """Average over old modalities of their mean per-dataset drop after stage m."""
    if m < 1:
        raise ContractError("forgetting is defined for stages m >= 1")
    per_modality = []
    for i in range(m):
        idx = sm.filtered(i, domain)
        if not idx:
            raise ContractError(f"modality {i} has no datasets under filter {domain!r}")
        drops = [_best_before(sm, m, i, n) - sm.get(m, i, n) for n in idx]
        per_modality.append(sum(drops) / len(drops))
    return sum(per_modality) / m


def dataset_forgetting(sm: ScoreMatrix, i: int, n: int) -> float:
    """Mean drop from the running-best score over all stages after i."""
    last = sm.n_stages - 1
    if i >= last:
        raise ContractError(f"modality {i} has no later stages to forget in")
    terms = [_best_before(sm, m, i, n) - sm.get(m, i, n) for m in range(i + 1, last + 1)]
    return sum(terms) / len(terms)


def transfer_after_stage(sm: ScoreMatrix, m: int, domain: str | None = None) -> float:
    """Mean score on the newly learned modality right after its stage."""
    idx = sm.filtered(m, domain)
    if not idx:
        raise ContractError(f"modality {m} has no datasets under filter {domain!r}")
    return sum(sm.get(m, m, n) for n in idx) / len(idx)


def dataset_transfer(sm: ScoreMatrix, i: int, n: int) -> float:
    return sm.get(i, i, n)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    """Everything recomputable from the matrix, under one domain filter."""

    label: str
    domain: str | None
    stage_transfer: dict = field(default_factory=dict)      # m -> T_m
    stage_forgetting: dict = field(default_factory=dict)    # m -> F_m
    dataset_transfer: dict = field(default_factory=dict)    # name -> T_hat
    dataset_forgetting: dict = field(default_factory=dict)  # name -> F_hat

    def to_json(self) -> str:
        doc = {
            "format": "pathweave-metrics",
            "version": 1,
            "label": self.label,
            "domain": self.domain,
            "stage_transfer": {str(k): v for k, v in self.stage_transfer.items()},
            "stage_forgetting": {str(k): v for k, v in self.stage_forgetting.items()},
            "dataset_transfer": self.dataset_transfer,
            "dataset_forgetting": self.dataset_forgetting,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        if doc.get("format") != "pathweave-metrics":
            raise ContractError("not a metric-report document")
        return cls(
            label=doc["label"],
            domain=doc["domain"],
            stage_transfer={int(k): v for k, v in doc["stage_transfer"].items()},
            stage_forgetting={int(k): v for k, v in doc["stage_forgetting"].items()},
            dataset_transfer=doc["dataset_transfer"],
            dataset_forgetting=doc["dataset_forgetting"],
        )


def build_report(sm: ScoreMatrix, domain: str | None = None, label: str = "run") -> MetricReport:
    rep = MetricReport(label=label, domain=domain)
    for m in range(sm.n_stages):
        rep.stage_transfer[m] = transfer_after_stage(sm, m, domain)
        if m >= 1:
            rep.stage_forgetting[m] = forgetting_after_stage(sm, m, domain)
    last = sm.n_stages - 1
    for i in range(sm.n_stages):
        for n in sm.filtered(i, domain):
            name = sm.dataset_name(i, n)
            rep.dataset_transfer[name] = dataset_transfer(sm, i, n)
            if i < last:
                rep.dataset_forgetting[name] = dataset_forgetting(sm, i, n)
    return rep


def render_report(reports, fmt: str = "markdown") -> str:
    """Deterministic comparison table over one or more reports."""
    if isinstance(reports, MetricReport):
        reports = [reports]
    if fmt not in ("markdown", "csv"):
        raise ContractError(f"format must be markdown or csv, got {fmt!r}")
    stage_ids = sorted({m for r in reports for m in r.stage_transfer})
    names = []
    for r in reports:
        for name in list(r.dataset_transfer) + list(r.dataset_forgetting):
            if name not in names:
                names.append(name)

    if fmt == "csv":
        lines = ["section,key," + ",".join(r.label for r in reports)]
        for m in stage_ids:
            lines.append(f"stage_transfer,T{m}," + ",".join(
                _cell(r.stage_transfer.get(m), "%r") for r in reports))
        for m in stage_ids:
            if m == 0:
                continue
            lines.append(f"stage_forgetting,F{m}," + ",".join(
                _cell(r.stage_forgetting.get(m), "%r") for r in reports))
        for name in names:
            lines.append(f"dataset_transfer,{name}," + ",".join(
                _cell(r.dataset_transfer.get(name), "%r") for r in reports))
        for name in names:
            lines.append(f"dataset_forgetting,{name}," + ",".join(
                _cell(r.dataset_forgetting.get(name), "%r") for r in reports))
        return "\n".join(lines) + "\n"

    head = "| metric | " + " | ".join(r.label for r in reports) + " |"
    rule = "|---" * (len(reports) + 1) + "|"
    lines = ["# Metric comparison", "",
             f"Domain filter: {reports[0].domain or 'all'}", "", head, rule]
    for m in stage_ids:
        lines.append(f"| T_{m} | " + " | ".join(
            _cell(r.stage_transfer.get(m), "%.2f") for r in reports) + " |")
    for m in stage_ids:
        if m == 0:
            continue
        lines.append(f"| F_{m} | " + " | ".join(
            _cell(r.stage_forgetting.get(m), "%.2f") for r in reports) + " |")
    lines += ["", "| dataset | " + " | ".join(f"T^ {r.label} | F^ {r.label}" for r in reports) + " |",
              "|---" * (2 * len(reports) + 1) + "|"]
    for name in names:
        cells = []
        for r in reports:
            cells.append(_cell(r.dataset_transfer.get(name), "%.2f"))
            cells.append(_cell(r.dataset_forgetting.get(name), "%.2f"))
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _cell(v, spec: str) -> str:
    if v is None:
        return "-"
    return repr(float(v)) if spec == "%r" else spec % v
