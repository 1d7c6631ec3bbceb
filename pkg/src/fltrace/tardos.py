"""q-ary Tardos fingerprinting codes and the iterative catch-one accusation.

Each of the m shared triggers gets a secret bias vector drawn from a symmetric
Dirichlet(kappa), clipped to the box [tau, 1-(q-1)tau] by rejection sampling.
Owner codewords sample one class label per trigger from that bias.  Accusation
feeds triggers to a suspect model in index order, accumulating per-owner scores
with the U1/U0 score functions, and accuses as soon as any owner's cumulative
score clears the conservative threshold Z_t that caps the false-positive
probability at epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .container import load_trc, save_trc


class InvalidParameterError(ValueError):
    """Code parameters outside their valid domain."""


class DegenerateBiasError(ValueError):
    """Observed-class bias probability fell outside (0, 1)."""


class OracleError(RuntimeError):
    """The suspect oracle failed; carries the query index."""

    def __init__(self, index: int, cause: BaseException | None = None):
        super().__init__(f"oracle failed at query index {index}: {cause!r}")
        self.index = index


@dataclass(frozen=True)
class BiasMatrix:
    """Secret per-trigger bias vectors p^(i), one row per trigger."""

    entries: np.ndarray  # (m, q) float64, rows sum to 1
    tau: float
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=np.float64))
        m, q = self.entries.shape
        if m < 1 or q < 2:
            raise InvalidParameterError(f"need m >= 1, q >= 2, got {m}x{q}")
        if not (0.0 < self.tau < 1.0 / q):
            raise InvalidParameterError(f"tau={self.tau} outside (0, 1/q) for q={q}")
        if not np.allclose(self.entries.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidParameterError("bias rows must sum to 1")
        hi = 1.0 - (q - 1) * self.tau
        if self.entries.min() < self.tau - 1e-12 or self.entries.max() > hi + 1e-12:
            raise InvalidParameterError("bias entries violate the cutoff box")

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def q(self) -> int:
        return self.entries.shape[1]

    def save(self, path) -> None:
        save_trc(path, {
            "entries": self.entries,
            "tau": np.array([self.tau]),
            "kappa": np.array([self.kappa]),
        })

    @classmethod
    def load(cls, path) -> "BiasMatrix":
        blocks = load_trc(path)
        return cls(blocks["entries"], float(blocks["tau"][0]), float(blocks["kappa"][0]))

    def to_json_dict(self) -> dict:
        return {"m": self.m, "q": self.q, "tau": self.tau, "kappa": self.kappa,
                "entries": self.entries.tolist()}


@dataclass(frozen=True)
class CodeBook:
    """Owner codewords: labels[j, i] is owner j's class label for trigger i."""

    labels: np.ndarray  # (n_owners, m) uint16
    owner_ids: tuple = ()

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint16)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 2 or labels.shape[0] < 1:
            raise InvalidParameterError("codebook needs at least one owner row")
        ids = self.owner_ids or tuple(range(labels.shape[0]))
        if len(ids) != labels.shape[0]:
            raise InvalidParameterError("owner_ids length must match label rows")
        object.__setattr__(self, "owner_ids", tuple(ids))

    @property
    def n_owners(self) -> int:
        return self.labels.shape[0]

    @property
    def m(self) -> int:
        return self.labels.shape[1]

    def save(self, path) -> None:
        save_trc(path, {
            "labels": self.labels,
            "owner_ids": np.asarray(self.owner_ids, dtype=np.uint16),
        })

    @classmethod
    def load(cls, path) -> "CodeBook":
        blocks = load_trc(path)
        return cls(blocks["labels"], tuple(int(i) for i in blocks["owner_ids"]))

    def to_json_dict(self) -> dict:
        return {"n_owners": self.n_owners, "m": self.m,
                "owner_ids": list(self.owner_ids), "labels": self.labels.tolist()}


@dataclass(frozen=True)
class AccusationResult:
    accused: int | None
    t_star: int
    final_scores: np.ndarray
    threshold_at_stop: float
    exhausted: bool
    owner_ids: tuple = ()

    def to_json_dict(self) -> dict:
        return {
            "accused": self.accused,
            "t_star": self.t_star,
            "threshold_at_stop": self.threshold_at_stop,
            "exhausted": self.exhausted,
            "final_scores": {str(oid): float(s)
                             for oid, s in zip(self.owner_ids, self.final_scores)},
        }


def sample_bias_matrix(m: int, q: int, kappa: float, tau: float,
                       seed) -> BiasMatrix:
    """Draw m bias rows i.i.d. from symmetric Dirichlet(kappa) inside the box.

    Rows violating [tau, 1-(q-1)tau] are redrawn whole (rejection sampling), so
    the conditional distribution stays symmetric.  Deterministic given seed.
    """
    if m < 1 or q < 2:
        raise InvalidParameterError(f"need m >= 1 and q >= 2, got m={m}, q={q}")
    if kappa <= 0:
        raise InvalidParameterError(f"kappa must be positive, got {kappa}")
    if not (0.0 < tau < 1.0 / q):
        raise InvalidParameterError(f"tau={tau} outside (0, 1/q) for q={q}")
    rng = np.random.default_rng(seed)
    hi = 1.0 - (q - 1) * tau
    rows = np.empty((m, q), dtype=np.float64)
    todo = np.arange(m)
    while todo.size:
        draw = rng.dirichlet(np.full(q, float(kappa)), size=todo.size)
        ok = (draw.min(axis=1) >= tau) & (draw.max(axis=1) <= hi)
        rows[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return BiasMatrix(rows, tau=float(tau), kappa=float(kappa))


def generate_codebook(bias: BiasMatrix, n_owners: int, seed) -> CodeBook:
    """Sample each owner's codeword from the per-trigger bias rows."""
    if n_owners < 1:
        raise InvalidParameterError(f"need n_owners >= 1, got {n_owners}")
    rng = np.random.default_rng(seed)
    # inverse-CDF per (owner, trigger); cumsum rows are monotone with last = 1
    cum = np.cumsum(bias.entries, axis=1)
    cum[:, -1] = 1.0
    u = rng.random((n_owners, bias.m))
    labels = (u[:, :, None] >= cum[None, :, :]).sum(axis=2).astype(np.uint16)
    return CodeBook(labels)


def score_increment(owner_label: int, observed_output: int,
                    bias_row: np.ndarray) -> float:
    """Per-query score term: U1 on a label match, U0 on a mismatch.

    Both functions are evaluated at the bias probability of the *observed*
    class, which makes the expected increment of an independent owner exactly
    zero: p*U1(p) + (1-p)*U0(p) = 0.
    """
    p = float(bias_row[observed_output])
    if not (0.0 < p < 1.0):
        raise DegenerateBiasError(f"observed-class bias {p} outside (0, 1)")
    if owner_label == observed_output:
        return float(np.sqrt((1.0 - p) / p))
    return float(-np.sqrt(p / (1.0 - p)))


def accusation_threshold(t: int, epsilon: float, tau: float) -> float:
    """Positive root Z_t of the false-positive bound at equality.

    Solving exp(-Z^2/(2t) / (1 + Z/(3 t sqrt(tau)))) = epsilon for Z > 0 gives
    Z_t = ln(eps) * (-1/(3 sqrt(tau)) - sqrt(1/(9 tau) - 2t/ln(eps))).
    """
    if t < 1:
        raise InvalidParameterError(f"t must be >= 1, got {t}")
    if not (0.0 < epsilon < 1.0):
        raise InvalidParameterError(f"epsilon={epsilon} outside (0, 1)")
    if not (0.0 < tau < 1.0):
        raise InvalidParameterError(f"tau={tau} outside (0, 1)")
    log_eps = np.log(epsilon)
    return float(log_eps * (-1.0 / (3.0 * np.sqrt(tau))
                            - np.sqrt(1.0 / (9.0 * tau) - 2.0 * t / log_eps)))


def threshold_curve(t_max: int, epsilon: float, tau: float) -> np.ndarray:
    """Vector of Z_t for t = 1..t_max."""
    t = np.arange(1, t_max + 1, dtype=np.float64)
    log_eps = np.log(epsilon)
    return log_eps * (-1.0 / (3.0 * np.sqrt(tau))
                      - np.sqrt(1.0 / (9.0 * tau) - 2.0 * t / log_eps))


def accuse(oracle: Callable[[int], int], codebook: CodeBook, bias: BiasMatrix,
           epsilon: float) -> AccusationResult:
    """Iterative catch-one accusation against a query oracle.

    Triggers are presented in stored index order.  After query t every owner's
    cumulative score is updated; the first owner to reach Z_t is accused (ties:
    highest score, then lowest owner index).  If no score crosses by t = m the
    result is marked exhausted.
    """
    if codebook.m != bias.m:
        raise InvalidParameterError(
            f"codebook m={codebook.m} does not match bias m={bias.m}")
    labels = codebook.labels
    scores = np.zeros(codebook.n_owners, dtype=np.float64)
    for t in range(1, bias.m + 1):
        i = t - 1
        try:
            y = int(oracle(i))
        except Exception as exc:  # noqa: BLE001 - context added, then re-raised
            raise OracleError(i, exc) from exc
        if not (0 <= y < bias.q):
            raise OracleError(i, ValueError(f"oracle answered {y}, q={bias.q}"))
        p = bias.entries[i, y]
        u1 = np.sqrt((1.0 - p) / p)
        u0 = -np.sqrt(p / (1.0 - p))
        scores += np.where(labels[:, i] == y, u1, u0)
        z = accusation_threshold(t, epsilon, bias.tau)
        if scores.max() >= z:
            j = int(np.argmax(scores))  # argmax breaks ties at lowest index
            return AccusationResult(accused=codebook.owner_ids[j], t_star=t,
                                    final_scores=scores.copy(),
                                    threshold_at_stop=z, exhausted=False,
                                    owner_ids=codebook.owner_ids)
    return AccusationResult(accused=None, t_star=bias.m,
                            final_scores=scores.copy(),
                            threshold_at_stop=accusation_threshold(
                                bias.m, epsilon, bias.tau),
                            exhausted=True, owner_ids=codebook.owner_ids)


def accuse_from_outputs(outputs: Sequence[int], codebook: CodeBook,
                        bias: BiasMatrix, epsilon: float) -> AccusationResult:
    """Vectorized accusation over precomputed oracle answers.

    Agrees with :func:`accuse` on identical inputs (the sequential process is
    just replayed in closed form); used for mass trials where a Python loop per
    query would dominate.
    """
    outputs = np.asarray(outputs, dtype=np.int64)
    if outputs.shape != (bias.m,):
        raise InvalidParameterError(
            f"need exactly m={bias.m} outputs, got shape {outputs.shape}")
    if codebook.m != bias.m:
        raise InvalidParameterError(
            f"codebook m={codebook.m} does not match bias m={bias.m}")
    if outputs.min() < 0 or outputs.max() >= bias.q:
        bad = int(np.argmax((outputs < 0) | (outputs >= bias.q)))
        raise OracleError(bad, ValueError(f"output {outputs[bad]} out of range"))
    p = bias.entries[np.arange(bias.m), outputs]
    u1 = np.sqrt((1.0 - p) / p)
    u0 = -np.sqrt(p / (1.0 - p))
    inc = np.where(codebook.labels == outputs[None, :], u1[None, :], u0[None, :])
    cum = np.cumsum(inc, axis=1)
    z = threshold_curve(bias.m, epsilon, bias.tau)
    best = cum.max(axis=0)
    crossed = np.flatnonzero(best >= z)
    if crossed.size == 0:
        return AccusationResult(accused=None, t_star=bias.m,
                                final_scores=cum[:, -1].copy(),
                                threshold_at_stop=float(z[-1]), exhausted=True,
                                owner_ids=codebook.owner_ids)
    t = int(crossed[0]) + 1
    j = int(np.argmax(cum[:, t - 1]))
    return AccusationResult(accused=codebook.owner_ids[j], t_star=t,
                            final_scores=cum[:, t - 1].copy(),
                            threshold_at_stop=float(z[t - 1]), exhausted=False,
                            owner_ids=codebook.owner_ids)
