"""Metrics and end-to-end accusation experiments.

Covers the leakage-side measurements (marking-assumption violations, trigger
accuracy, activation histograms, protection threshold) and the trial driver
that merges random colluder sets, applies post-attacks, and runs both
accusation channels, emitting JSON/CSV reports.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attacks as atk
from . import nnengine as nn
from . import tardos
from . import whitebox
from .datasets import TriggerSet
from .nnengine import ModelParams
from .tardos import AccusationResult, BiasMatrix, CodeBook
from .whitebox import OwnerBasis, ProjectionMatrix, WhiteboxReport


def predict_labels(model: ModelParams, images: np.ndarray,
                   batch: int = 64) -> np.ndarray:
    """Argmax class per image, evaluated in batches."""
    return nn.predict_classes(model, images, batch=batch)


def mav(suspect: ModelParams, triggers: TriggerSet, codebook: CodeBook,
        colluders) -> float:
    """Fraction of triggers answered with a label no colluder holds."""
    colluders = list(colluders)
    if not colluders:
        raise ValueError("colluders must be nonempty")
    y = predict_labels(suspect, triggers.images)
    held = codebook.labels[colluders, :]  # (c, m)
    violated = ~np.any(held == y[None, :], axis=0)
    return float(np.mean(violated))


def trigger_accuracy(model: ModelParams, triggers: TriggerSet,
                     labels: np.ndarray) -> float:
    """Fraction of triggers classified as the owner's codeword label."""
    if labels.shape[0] != triggers.m:
        raise ValueError(f"{labels.shape[0]} labels for {triggers.m} triggers")
    y = predict_labels(model, triggers.images)
    return float(np.mean(y == np.asarray(labels, dtype=np.int64)))


def blackbox_trace(suspect: ModelParams, triggers: TriggerSet,
                   codebook: CodeBook, bias: BiasMatrix,
                   epsilon: float) -> AccusationResult:
    """Query the suspect on every trigger and run the sequential accusation."""
    outputs = predict_labels(suspect, triggers.images)
    return tardos.accuse_from_outputs(outputs, codebook, bias, epsilon)


def whitebox_trace(suspect: ModelParams, projection: ProjectionMatrix,
                   basis: OwnerBasis, threshold: float = 0.11
                   ) -> WhiteboxReport:
    """Project the suspect's carrier-layer weights onto every owner vector."""
    return whitebox.accuse_whitebox(suspect.carrier_weights(), projection,
                                    basis, threshold)


@dataclass(frozen=True)
class ActivationHistogram:
    counts: np.ndarray
    bin_edges: np.ndarray
    above_threshold: int
    threshold: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def activation_histogram(model: ModelParams, triggers: TriggerSet, layer: int,
                         threshold: float = 0.1, bins: int = 100,
                         batch: int = 64) -> ActivationHistogram:
    """Histogram of a conv layer's post-ReLU activations over the trigger set."""
    chunks = []
    for start in range(0, triggers.m, batch):
        acts = nn.forward_features(model, triggers.images[start:start + batch],
                                   layer)
        chunks.append(acts.ravel())
    flat = np.concatenate(chunks)
    top = float(flat.max()) if flat.size else 0.0
    counts, edges = np.histogram(flat, bins=bins,
                                 range=(0.0, top if top > 0 else 1.0))
    return ActivationHistogram(counts=counts, bin_edges=edges,
                               above_threshold=int(np.sum(flat > threshold)),
                               threshold=threshold)


def protection_threshold(baseline_accuracies) -> float:
    """Mean single-owner baseline accuracy: the traceability deadline."""
    accs = np.asarray(list(baseline_accuracies), dtype=np.float64)
    if accs.size == 0:
        raise ValueError("need at least one baseline accuracy")
    return float(accs.mean())


# ------------------------------------------------------------ trial driver

@dataclass(frozen=True)
class TrialRecord:
    """One collusion + attack + both accusation channels."""

    index: int
    strategy: str
    c: int
    attack: str
    colluders: tuple[int, ...]
    accused_bb: int | None
    t_star: int | None
    exhausted: bool
    false_negative: bool
    innocent_accused: bool
    accused_wb: tuple[int, ...]
    wb_exact: bool
    mav: float
    main_accuracy: float | None = None

    def to_json_dict(self) -> dict:
        d = dict(self.__dict__)
        d["colluders"] = list(self.colluders)
        d["accused_wb"] = list(self.accused_wb)
        return d


CSV_FIELDS = ["index", "strategy", "c", "attack", "colluders", "accused_bb",
              "t_star", "exhausted", "false_negative", "innocent_accused",
              "accused_wb", "wb_exact", "mav", "main_accuracy"]


@dataclass
class ExperimentReport:
    """Aggregated outcome of a batch of collusion trials."""

    strategy: str
    trials: list[TrialRecord] = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def false_negatives(self) -> int:
        return sum(t.false_negative for t in self.trials)

    @property
    def innocent_accusations(self) -> int:
        return sum(t.innocent_accused for t in self.trials)

    @property
    def wb_exact_count(self) -> int:
        return sum(t.wb_exact for t in self.trials)

    def t_star_stats(self) -> dict:
        ts = [t.t_star for t in self.trials if t.t_star is not None]
        if not ts:
            return {"min": None, "median": None, "max": None, "mean": None}
        return {"min": int(np.min(ts)), "median": float(np.median(ts)),
                "max": int(np.max(ts)), "mean": float(np.mean(ts))}

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_trials": self.n_trials,
            "false_negatives": self.false_negatives,
            "innocent_accusations": self.innocent_accusations,
            "wb_exact_count": self.wb_exact_count,
            "mav_mean": float(np.mean([t.mav for t in self.trials]))
            if self.trials else None,
            "t_star": self.t_star_stats(),
        }

    def to_json_dict(self) -> dict:
        return {"summary": self.summary(),
                "trials": [t.to_json_dict() for t in self.trials]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for t in self.trials:
                row = t.to_json_dict()
                row["colluders"] = " ".join(map(str, t.colluders))
                row["accused_wb"] = " ".join(map(str, t.accused_wb))
                writer.writerow(row)


@dataclass(frozen=True)
class TrialCell:
    """A (collusion size, post-attack, repetition count) block of trials."""

    c: int
    post_attack: atk.FineTune | atk.Prune | None
    n_trials: int

    @property
    def attack_name(self) -> str:
        if self.post_attack is None:
            return "None"
        return type(self.post_attack).__name__


_CTX: dict = {}


def _run_one_trial(args) -> TrialRecord:
    index, c, post_attack, attack_name, colluders, seed = args
    ctx = _CTX
    spec = atk.AttackSpec(colluders=tuple(int(j) for j in colluders),
                          post_attack=post_attack, seed=seed)
    merged = atk.run_attack(ctx["copies"], spec, ctx["attack_x"],
                            ctx["attack_y"])
    bb = blackbox_trace(merged, ctx["triggers"], ctx["codebook"], ctx["bias"],
                        ctx["epsilon"])
    wb = whitebox_trace(merged, ctx["projection"], ctx["basis"],
                        ctx["wb_threshold"])
    mav_value = mav(merged, ctx["triggers"], ctx["codebook"], spec.colluders)
    acc = None
    if ctx["acc_x"] is not None:
        acc = nn.evaluate_accuracy(merged, ctx["acc_x"], ctx["acc_y"])
    colluder_set = set(spec.colluders)
    accused_bb = None if bb.exhausted else int(bb.accused)
    return TrialRecord(
        index=index, strategy=ctx["strategy"], c=c, attack=attack_name,
        colluders=spec.colluders, accused_bb=accused_bb,
        t_star=None if bb.exhausted else int(bb.t_star),
        exhausted=bool(bb.exhausted),
        false_negative=bool(bb.exhausted),
        innocent_accused=accused_bb is not None and accused_bb not in colluder_set,
        accused_wb=tuple(int(j) for j in wb.accused),
        wb_exact=set(int(j) for j in wb.accused) == colluder_set,
        mav=mav_value, main_accuracy=acc)


def run_collusion_trials(copies, *, triggers: TriggerSet, codebook: CodeBook,
                         bias: BiasMatrix, basis: OwnerBasis,
                         projection: ProjectionMatrix, attack_x, attack_y,
                         cells, epsilon: float, wb_threshold: float = 0.11,
                         seed=0, strategy_name: str = "", acc_x=None,
                         acc_y=None, jobs: int = 1,
                         progress=None) -> ExperimentReport:
    """Run every trial cell and aggregate the records.

    Colluder sets are drawn uniformly without replacement per trial from the
    available copies; each trial gets a child seed for its post-attack.
    `jobs` > 1 forks worker processes (trials are independent).
    """
    rng = np.random.default_rng(seed)
    n_owners = len(copies)
    tasks = []
    index = 0
    for cell in cells:
        if cell.c > n_owners:
            raise ValueError(f"collusion size {cell.c} exceeds {n_owners} copies")
        for _ in range(cell.n_trials):
            colluders = np.sort(rng.choice(n_owners, size=cell.c,
                                           replace=False))
            tasks.append((index, cell.c, cell.post_attack, cell.attack_name,
                          colluders, int(rng.integers(2**31))))
            index += 1

    global _CTX
    _CTX = {"copies": copies, "triggers": triggers, "codebook": codebook,
            "bias": bias, "basis": basis, "projection": projection,
            "attack_x": attack_x, "attack_y": attack_y, "epsilon": epsilon,
            "wb_threshold": wb_threshold, "strategy": strategy_name,
            "acc_x": acc_x, "acc_y": acc_y}
    report = ExperimentReport(strategy=strategy_name)
    if jobs > 1 and len(tasks) > 1 and hasattr(os, "fork"):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_run_one_trial, tasks):
                report.trials.append(rec)
                if progress is not None:
                    progress(rec)
    else:
        for task in tasks:
            rec = _run_one_trial(task)
            report.trials.append(rec)
            if progress is not None:
                progress(rec)
    return report
