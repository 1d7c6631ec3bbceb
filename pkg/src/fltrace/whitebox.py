"""Orthonormal owner vectors, the projection regularizer, and catch-all accusation.

Owner j's white-box identity is a column s_j of a p-dimensional orthonormal
basis.  A single secret Gaussian matrix D projects a layer's flattened weights
w into that space; the normalized projection r_j = (w D) . s_j / ||w D|| is
pushed toward 1 during training by the regularizer exp(-r_j).  Because the same
D is shared by all owners and the basis is orthonormal, embedding one owner
leaves the other projections mean-zero, and averaging c embedded copies yields
r = 1/sqrt(c) for colluders and 0 for everyone else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import load_trc, save_trc


class InvalidParameterError(ValueError):
    pass


class DegenerateWeightsError(ValueError):
    """||w D|| vanished: the carrier layer is unembedded or zeroed out."""


@dataclass(frozen=True)
class OwnerBasis:
    """Full orthonormal basis; the first n_owners columns are assigned."""

    vectors: np.ndarray  # (p, p) float64, orthonormal columns
    n_owners: int

    def __post_init__(self):
        object.__setattr__(self, "vectors",
                           np.asarray(self.vectors, dtype=np.float64))
        p = self.vectors.shape[0]
        if self.vectors.shape != (p, p):
            raise InvalidParameterError("basis must be square")
        if not (1 <= self.n_owners <= p):
            raise InvalidParameterError(
                f"n_owners={self.n_owners} outside [1, p={p}]")

    @property
    def p(self) -> int:
        return self.vectors.shape[0]

    def column(self, j: int) -> np.ndarray:
        return self.vectors[:, j]

    def assigned(self) -> np.ndarray:
        return self.vectors[:, : self.n_owners]

    def save(self, path) -> None:
        save_trc(path, {"vectors": self.vectors,
                        "n_owners": np.array([self.n_owners], dtype=np.uint16)})

    @classmethod
    def load(cls, path) -> "OwnerBasis":
        blocks = load_trc(path)
        return cls(blocks["vectors"], int(blocks["n_owners"][0]))


@dataclass(frozen=True)
class ProjectionMatrix:
    """Secret l x p Gaussian projection shared by all owners."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries)
        if arr.ndim != 2:
            raise InvalidParameterError("projection matrix must be 2-D")
        object.__setattr__(self, "entries", arr)

    @property
    def l(self) -> int:
        return self.entries.shape[0]

    @property
    def p(self) -> int:
        return self.entries.shape[1]

    def save(self, path) -> None:
        save_trc(path, {"entries": self.entries})

    @classmethod
    def load(cls, path) -> "ProjectionMatrix":
        return cls(load_trc(path)["entries"])


@dataclass(frozen=True)
class WhiteboxReport:
    projections: np.ndarray  # r_j for assigned owners
    accused: tuple
    threshold: float
    owner_ids: tuple = ()

    def to_json_dict(self) -> dict:
        ids = self.owner_ids or tuple(range(len(self.projections)))
        return {"threshold": self.threshold,
                "accused": list(self.accused),
                "projections": {str(oid): float(r)
                                for oid, r in zip(ids, self.projections)}}


def generate_basis(p: int, n_owners: int, seed) -> OwnerBasis:
    """Orthonormalize a seeded Gaussian square matrix (QR with fixed signs)."""
    if not (1 <= n_owners <= p):
        raise InvalidParameterError(f"need 1 <= n_owners <= p, got {n_owners} > {p}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((p, p))
    q, r = np.linalg.qr(g)
    # fix the sign ambiguity so the basis is deterministic
    q = q * np.sign(np.diag(r))[None, :]
    return OwnerBasis(q, n_owners)


def generate_projection(l: int, p: int, seed, dtype=np.float64) -> ProjectionMatrix:
    """Sample D with i.i.d. standard-normal entries."""
    rng = np.random.default_rng(seed)
    return ProjectionMatrix(rng.standard_normal((l, p)).astype(dtype, copy=False))


def _projected(w: np.ndarray, D: ProjectionMatrix) -> tuple[np.ndarray, float]:
    w = np.asarray(w).reshape(-1)
    if w.shape[0] != D.l:
        raise InvalidParameterError(
            f"weight length {w.shape[0]} does not match projection rows {D.l}")
    v = w @ D.entries
    norm = float(np.linalg.norm(v))
    if not np.isfinite(norm) or norm == 0.0:
        raise DegenerateWeightsError(f"||w D|| = {norm}")
    return v, norm


def project(w: np.ndarray, D: ProjectionMatrix, s_j: np.ndarray) -> float:
    """Normalized projection r_j = (w D) . s_j / ||w D||, in [-1, 1]."""
    v, norm = _projected(w, D)
    return float(np.dot(v, np.asarray(s_j).reshape(-1)) / norm)


def project_all(w: np.ndarray, D: ProjectionMatrix, basis: OwnerBasis) -> np.ndarray:
    """r_j for every assigned owner at once."""
    v, norm = _projected(w, D)
    return (v @ basis.assigned()) / norm


def regularizer_loss_and_grad(w: np.ndarray, D: ProjectionMatrix,
                              s_j: np.ndarray) -> tuple[float, np.ndarray]:
    """exp(-r_j) and its exact gradient with respect to w.

    With v = D^T w and vhat = v/||v||, the chain rule gives
    d r_j / d w = D (s_j - r_j vhat) / ||v||, which is orthogonal to w, so the
    regularizer rotates the carrier without inflating its norm.
    """
    s = np.asarray(s_j).reshape(-1)
    v, norm = _projected(w, D)
    r = float(np.dot(v, s) / norm)
    loss = float(np.exp(-r))
    # keep the long GEMV in D's dtype: mixed operands would silently promote
    # (and copy) the whole matrix
    u = ((s - r * v / norm) / norm).astype(D.entries.dtype, copy=False)
    dr_dw = D.entries @ u
    return loss, (-loss) * dr_dw


def accuse_whitebox(w: np.ndarray, D: ProjectionMatrix, basis: OwnerBasis,
                    threshold: float, owner_ids=()) -> WhiteboxReport:
    """Catch-all accusation: every owner with r_j >= threshold."""
    if threshold <= 0:
        raise InvalidParameterError(f"threshold must be positive, got {threshold}")
    r = project_all(w, D, basis)
    ids = tuple(owner_ids) or tuple(range(basis.n_owners))
    accused = tuple(ids[j] for j in np.flatnonzero(r >= threshold))
    return WhiteboxReport(projections=np.asarray(r, dtype=np.float64),
                          accused=accused, threshold=float(threshold),
                          owner_ids=ids)
