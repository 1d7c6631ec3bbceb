"""Federated training rounds with aggregator-side fingerprint embedding.

One aggregator keeps a fingerprinted model copy per data owner.  Each round it
samples a subset of owners, lets each compute a main-task gradient on its own
copy with a local mini-batch, averages those gradients, and applies the
averaged SGD update to every copy.  A watermark step then runs on each copy
(when the strategy's schedule fires): one SGD update that pushes the copy to
memorize the trigger set with the owner's codeword labels while aligning the
carrier-layer weights with the owner's basis vector.

Because local gradients are taken on the owner's own fingerprinted copy, every
owner's fingerprint leaks weakly into the averaged update; that leak is the
object of study and deliberately not "fixed".

Independent reference models (centralized watermarked training and single-
owner baselines for the protection threshold) live in `train_independent`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import nnengine as nn
from . import whitebox
from .datasets import PartitionedData, TriggerSet
from .nnengine import DivergenceError, ModelParams, TrainStepSpec, WmTerm


class TrainingDivergedError(RuntimeError):
    """Nonfinite loss during training; records the failing iteration."""

    def __init__(self, iteration: int, cause: Exception | None = None):
        super().__init__(f"training diverged at iteration {iteration}")
        self.iteration = iteration
        self.cause = cause


class Strategy(enum.Enum):
    """Watermark-embedding strategies for the federated experiment."""

    NO_WM = "NoWM"
    VANILLA_WM = "VanillaWM"
    DROPOUT_WM = "DropoutWM"
    DROPOUT_LIMITED_WM = "DropoutLimitedWM"
    INDEPENDENT_WM = "IndependentWM"
    INDEPENDENT_OWNER_BASELINE = "IndependentOwnerBaseline"
    VANILLA_DIF_WM = "VanillaDifWM"
    DROPOUT_DIF_WM = "DropoutDifWM"

    @classmethod
    def from_name(cls, name: str) -> "Strategy":
        for s in cls:
            if s.value == name or s.name == name:
                return s
        raise ValueError(f"unknown strategy {name!r}; expected one of "
                         f"{[s.value for s in cls]}")

    @property
    def watermarks(self) -> bool:
        return self not in (Strategy.NO_WM, Strategy.INDEPENDENT_OWNER_BASELINE)

    @property
    def uses_dropout(self) -> bool:
        return self in (Strategy.DROPOUT_WM, Strategy.DROPOUT_LIMITED_WM,
                        Strategy.DROPOUT_DIF_WM)

    @property
    def per_owner_triggers(self) -> bool:
        return self in (Strategy.VANILLA_DIF_WM, Strategy.DROPOUT_DIF_WM)

    @property
    def federated(self) -> bool:
        return self not in (Strategy.INDEPENDENT_WM,
                            Strategy.INDEPENDENT_OWNER_BASELINE)


@dataclass(frozen=True)
class Seeds:
    """Seeds for the training-side random streams."""

    model: int = 0
    rounds: int = 1


@dataclass
class FLConfig:
    """Federated training hyper-parameters.

    `iterations`, when None, is derived as epochs * epoch_length with
    epoch_length = train_size // (owners_per_round * local_batch).
    """

    strategy: Strategy = Strategy.DROPOUT_WM
    n_owners: int = 100
    owners_per_round: int = 10
    local_batch: int = 16
    learning_rate: float = 0.001
    epochs: int = 5
    iterations: int | None = None
    dropout_prob: float = 0.2
    lam: float = 1.0
    wm_batch: int = 16
    wm_enabled: bool = True
    dropout_in_main: bool = False
    seeds: Seeds = field(default_factory=Seeds)
    log_every: int = 10
    eval_subsample: int = 512

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = Strategy.from_name(self.strategy)
        if not isinstance(self.seeds, Seeds):
            self.seeds = Seeds(**dict(self.seeds))
        if self.owners_per_round > self.n_owners:
            raise ValueError("owners_per_round exceeds n_owners")
        if self.owners_per_round < 1 or self.local_batch < 1:
            raise ValueError("owners_per_round and local_batch must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.dropout_prob < 1.0):
            raise ValueError("dropout_prob outside [0, 1)")

    def epoch_length(self, train_size: int) -> int:
        return train_size // (self.owners_per_round * self.local_batch)

    def total_iterations(self, train_size: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.epochs * self.epoch_length(train_size)


@dataclass
class RoundLog:
    """Metrics sampled at the logging cadence during training."""

    iteration: int
    main_accuracy: float | None = None
    trigger_accuracy: float | None = None
    mean_projection: float | None = None
    mav_c2: float | None = None
    wm_step_executed: bool = False

    def to_json_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "main_accuracy": self.main_accuracy,
            "trigger_accuracy": self.trigger_accuracy,
            "mean_projection": self.mean_projection,
            "mav_c2": self.mav_c2,
            "wm_step_executed": self.wm_step_executed,
        }


def wm_schedule(strategy: Strategy, iteration: int, epoch_length: int) -> bool:
    """Whether the watermark step fires at this (0-based) iteration.

    The limited schedule fires every iteration in the first two epochs, every
    10th iteration in the next two, and every 100th from the fifth epoch on;
    all other watermarking strategies fire every iteration.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if not strategy.watermarks:
        return False
    if strategy is not Strategy.DROPOUT_LIMITED_WM:
        return True
    if epoch_length < 1:
        raise ValueError("epoch_length must be >= 1")
    epoch = iteration // epoch_length
    pos = iteration % epoch_length
    period = 1 if epoch < 2 else (10 if epoch < 4 else 100)
    return pos % period == 0


def watermark_step(copy: ModelParams, triggers: TriggerSet,
                   labels: np.ndarray, s_col: np.ndarray,
                   projection: whitebox.ProjectionMatrix, lam: float,
                   dropout_prob: float, cursor: int, learning_rate: float,
                   rng: np.random.Generator, wm_batch: int = 16) -> int:
    """One SGD update toward trigger memorization + carrier alignment.

    The mini-batch is taken cyclically from the trigger set starting at
    `cursor`; returns the advanced cursor.  `lam` scales the alignment
    regularizer exp(-r_j) added to the trigger cross-entropy.
    """
    if labels.shape[0] != triggers.m:
        raise ValueError(f"{labels.shape[0]} labels for {triggers.m} triggers")
    idx = np.arange(cursor, cursor + wm_batch) % triggers.m
    wm_term = WmTerm(lam=lam, projection=projection, s_col=s_col)
    step = TrainStepSpec(
        batch_x=triggers.images[idx],
        batch_y=np.asarray(labels[idx], dtype=np.int64),
        learning_rate=learning_rate,
        dropout_prob=dropout_prob,
        rng=rng,
        wm_term=wm_term,
    )
    nn.train_step(copy, step)
    return (cursor + wm_batch) % triggers.m


def _trigger_sets_for(strategy: Strategy, triggers, n_owners: int
                      ) -> list[TriggerSet]:
    if strategy.per_owner_triggers:
        if not isinstance(triggers, (list, tuple)) or len(triggers) != n_owners:
            raise ValueError("per-owner strategies need one TriggerSet per owner")
        return list(triggers)
    if isinstance(triggers, (list, tuple)):
        raise ValueError("shared-trigger strategies take a single TriggerSet")
    return [triggers] * n_owners


def run_fl_training(config: FLConfig, data: PartitionedData, triggers,
                    codebook, basis: whitebox.OwnerBasis,
                    projection: whitebox.ProjectionMatrix,
                    log_sink=None) -> tuple[list[ModelParams], list[RoundLog]]:
    """Run the federated rounds and return (model copies, round logs).

    `triggers` is one shared TriggerSet, or a list of per-owner sets for the
    Dif strategies.  Returns one copy per owner; under NoWM a single shared
    model is trained and the returned list holds that one model.
    `log_sink`, when given, receives each RoundLog as it is produced.
    """
    strategy = config.strategy
    if not strategy.federated:
        raise ValueError(f"{strategy.value} is trained via train_independent")
    n = config.n_owners
    if data.n_owners < n:
        raise ValueError(f"partition has {data.n_owners} shards, need {n}")
    trigger_sets = _trigger_sets_for(strategy, triggers, n)
    if strategy.watermarks:
        if codebook.labels.shape[0] < n:
            raise ValueError("codebook smaller than owner count")
        if codebook.labels.shape[1] != trigger_sets[0].m:
            raise ValueError("codebook length differs from trigger count")
        if basis.n_owners < n:
            raise ValueError("owner basis smaller than owner count")

    model = nn.build_model(seed=config.seeds.model)
    if strategy.watermarks and projection.l != model.carrier_weights().shape[0]:
        raise ValueError(f"projection rows {projection.l} != carrier length "
                         f"{model.carrier_weights().shape[0]}")
    models = [model] if strategy is Strategy.NO_WM \
        else [model.copy() for _ in range(n)]

    rng = np.random.default_rng(config.seeds.rounds)
    train_size = data.train_size if config.n_owners == data.n_owners else \
        sum(len(data.shard_labels[j]) for j in range(n))
    epoch_length = config.epoch_length(train_size)
    iterations = config.total_iterations(train_size)
    cursors = [0] * n
    s_cols = [basis.column(j) for j in range(n)] if strategy.watermarks else None
    logs: list[RoundLog] = []

    for t in range(iterations):
        sampled = rng.choice(n, size=config.owners_per_round, replace=False)
        grads = []
        main_dropout = config.dropout_prob \
            if (config.dropout_in_main and strategy.uses_dropout) else 0.0
        try:
            for j in sampled:
                shard_x, shard_y = data.shard_images[j], data.shard_labels[j]
                pick = rng.choice(len(shard_y), size=config.local_batch,
                                  replace=False)
                own = models[0] if len(models) == 1 else models[j]
                _, g = nn.loss_and_grads(
                    own, shard_x[pick], np.asarray(shard_y[pick], np.int64),
                    dropout_prob=main_dropout, rng=rng)
                grads.append(g)
            avg = nn.average_grads(grads)
            for m_ in models:
                nn.apply_grads(m_, avg, config.learning_rate)
            fired = config.wm_enabled and wm_schedule(strategy, t, epoch_length)
            if fired:
                for j in range(n):
                    cursors[j] = watermark_step(
                        models[j], trigger_sets[j], codebook.labels[j],
                        s_cols[j], projection, config.lam,
                        config.dropout_prob if strategy.uses_dropout else 0.0,
                        cursors[j], config.learning_rate, rng,
                        config.wm_batch)
        except (DivergenceError, whitebox.DegenerateWeightsError) as exc:
            # a nonfinite carrier norm is the wm-step face of the same blow-up
            raise TrainingDivergedError(t, exc) from exc

        if config.log_every and (t % config.log_every == 0 or t == iterations - 1):
            log = _round_log(t, fired, config, data, models, trigger_sets,
                            codebook, s_cols, projection, strategy, rng)
            logs.append(log)
            if log_sink is not None:
                log_sink(log)
    return models, logs


def _round_log(t, fired, config, data, models, trigger_sets, codebook, s_cols,
               projection, strategy, rng) -> RoundLog:
    probe = models[0]
    n_eval = len(data.eval_labels)
    sub = min(config.eval_subsample or n_eval, n_eval)
    pick = rng.choice(n_eval, size=sub, replace=False) if sub < n_eval \
        else np.arange(n_eval)
    main_acc = nn.evaluate_accuracy(probe, data.eval_images[pick],
                                    data.eval_labels[pick])
    trig_acc = None
    mean_r = None
    if strategy.watermarks:
        pred = nn.predict_classes(probe, trigger_sets[0].images)
        trig_acc = float(np.mean(pred == codebook.labels[0]))
        rs = [whitebox.project(m_.carrier_weights(), projection, s_cols[j])
              for j, m_ in enumerate(models[: min(len(models), 32)])]
        mean_r = float(np.mean(rs))
    return RoundLog(iteration=t, main_accuracy=main_acc,
                    trigger_accuracy=trig_acc, mean_projection=mean_r,
                    wm_step_executed=bool(fired))


def train_independent(mode: str, config: FLConfig, data: PartitionedData,
                      triggers: TriggerSet | None = None,
                      labels: np.ndarray | None = None,
                      s_col: np.ndarray | None = None,
                      projection: whitebox.ProjectionMatrix | None = None,
                      owner_id: int = 0
                      ) -> tuple[ModelParams, list[RoundLog]]:
    """Non-federated reference models.

    mode="FullDataWM": per round one main-task SGD update on a batch of
    owners_per_round * local_batch images drawn from the whole training
    portion, then a watermark step — a centralized emulation of the federated
    rounds.  mode="OwnerBaseline": plain SGD (batch = local_batch) on one
    owner's shard, no watermark; its final accuracy feeds the protection
    threshold.
    """
    if mode not in ("FullDataWM", "OwnerBaseline"):
        raise ValueError(f"unknown independent mode {mode!r}")
    model = nn.build_model(seed=config.seeds.model)
    rng = np.random.default_rng(config.seeds.rounds)
    logs: list[RoundLog] = []

    if mode == "FullDataWM":
        if triggers is None or labels is None or s_col is None or projection is None:
            raise ValueError("FullDataWM needs triggers, labels, s_col, projection")
        train_x = np.concatenate(data.shard_images)
        train_y = np.concatenate(data.shard_labels)
        batch = config.owners_per_round * config.local_batch
        iterations = config.total_iterations(len(train_y))
        cursor = 0
        dropout = config.dropout_prob if config.strategy.uses_dropout else 0.0
        for t in range(iterations):
            pick = rng.choice(len(train_y), size=batch, replace=False)
            try:
                step = TrainStepSpec(train_x[pick],
                                     np.asarray(train_y[pick], np.int64),
                                     learning_rate=config.learning_rate,
                                     rng=rng)
                nn.train_step(model, step)
                if config.wm_enabled:
                    cursor = watermark_step(model, triggers, labels, s_col,
                                            projection, config.lam, dropout,
                                            cursor, config.learning_rate, rng,
                                            config.wm_batch)
            except (DivergenceError, whitebox.DegenerateWeightsError) as exc:
                raise TrainingDivergedError(t, exc) from exc
            if config.log_every and (t % config.log_every == 0 or t == iterations - 1):
                logs.append(_independent_log(t, model, data, config, rng,
                                             triggers, labels))
        return model, logs

    shard_x = data.shard_images[owner_id]
    shard_y = data.shard_labels[owner_id]
    iterations = config.total_iterations(data.train_size)
    for t in range(iterations):
        pick = rng.choice(len(shard_y), size=min(config.local_batch,
                                                 len(shard_y)), replace=False)
        try:
            step = TrainStepSpec(shard_x[pick],
                                 np.asarray(shard_y[pick], np.int64),
                                 learning_rate=config.learning_rate, rng=rng)
            nn.train_step(model, step)
        except DivergenceError as exc:
            raise TrainingDivergedError(t, exc) from exc
        if config.log_every and (t % config.log_every == 0 or t == iterations - 1):
            logs.append(_independent_log(t, model, data, config, rng))
    return model, logs


def _independent_log(t, model, data, config, rng, triggers=None, labels=None
                     ) -> RoundLog:
    n_eval = len(data.eval_labels)
    sub = min(config.eval_subsample or n_eval, n_eval)
    pick = rng.choice(n_eval, size=sub, replace=False) if sub < n_eval \
        else np.arange(n_eval)
    acc = nn.evaluate_accuracy(model, data.eval_images[pick],
                               data.eval_labels[pick])
    trig = None
    if triggers is not None and labels is not None:
        pred = nn.predict_classes(model, triggers.images)
        trig = float(np.mean(pred == labels))
    return RoundLog(iteration=t, main_accuracy=acc, trigger_accuracy=trig)
