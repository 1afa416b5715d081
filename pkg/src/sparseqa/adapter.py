"""Contrastive training of a linear adapter over frozen embeddings.

The adapter is a d x d matrix W applied to the raw query embedding and
re-normalized: v = W q / ||W q||. The loss pulls v toward positive chunk
embeddings and away from sampled negatives:

    L = -(1/P) * sum over positives i of
        log( exp(s_i/t) / (exp(s_i/t) + sum over negatives j of exp(s_j/t)) )

with s = cosine similarity and temperature t. Each positive's denominator
contains only that positive plus all negatives. The gradient with respect to
W is analytic, including the normalization Jacobian, and is checked against
central finite differences in the tests.

Exponential sums accumulate over value-sorted terms, so the loss is exactly
invariant under permutations of the positives and of the negatives.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .doc_model import ImageChunk, ParsedDocument, TextChunk
from .errors import ConfigError, DimsError, DomainError, TrainingDivergedError

ArrayLike = Union[np.ndarray, "object"]


def _as_unit_array(v) -> np.ndarray:
    arr = np.asarray(getattr(v, "values", v), dtype=np.float64)
    if arr.ndim != 1:
        raise DimsError(f"expected 1-d vector, got shape {arr.shape}")
    return arr


def _check_tau(tau: float) -> None:
    if not (tau > 0):
        raise ConfigError(f"temperature must be positive, got {tau}")


def _sorted_logsumexp(vals: np.ndarray) -> float:
    # fixed accumulation order: ascending by value
    vals = np.sort(vals)
    m = vals[-1]
    return float(m + np.log(np.sum(np.exp(vals - m))))


@dataclass(frozen=True)
class TrainingBatch:
    query_vec: np.ndarray            # raw, pre-adapter, unit norm
    positive_vecs: tuple[np.ndarray, ...]
    negative_vecs: tuple[np.ndarray, ...]
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.positive_vecs) < 1 or len(self.negative_vecs) < 1:
            raise ConfigError("batch needs at least one positive and one negative")
        d = self.query_vec.shape[0]
        for v in (*self.positive_vecs, *self.negative_vecs):
            if v.shape != (d,):
                raise DimsError("all batch vectors must share dims")


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.07
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        _check_tau(self.temperature)


@dataclass(frozen=True)
class LossReport:
    l_rep: float
    l_qa_external: Optional[float]
    l_total: float


@dataclass
class LinearAdapter:
    """d_out x d_in weight matrix; output is re-normalized to unit length."""

    weight: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if not np.all(np.isfinite(self.weight)):
            raise DomainError("adapter weights must be finite")

    @staticmethod
    def identity(dims: int) -> "LinearAdapter":
        return LinearAdapter(np.eye(dims))

    def apply(self, query_vec) -> np.ndarray:
        u = self.weight @ _as_unit_array(query_vec)
        n = np.linalg.norm(u)
        if n == 0 or not np.isfinite(n):
            raise DomainError("adapter output cannot be normalized")
        return u / n

    def save(self, path: Path) -> None:
        d_out, d_in = self.weight.shape
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(
            b"WKAD" + struct.pack("<II", d_out, d_in)
            + self.weight.astype("<f4").tobytes()
        )

    @staticmethod
    def load(path: Path) -> "LinearAdapter":
        data = Path(path).read_bytes()
        if data[:4] != b"WKAD":
            raise DomainError(f"{path}: not an adapter file")
        d_out, d_in = struct.unpack_from("<II", data, 4)
        w = np.frombuffer(data, dtype="<f4", count=d_out * d_in, offset=12)
        return LinearAdapter(w.reshape(d_out, d_in).astype(np.float64))


def contrastive_loss(query_vec, positives: Sequence, negatives: Sequence,
                     tau: float = 0.07) -> float:
    """Per-positive softmax loss over (that positive + all negatives)."""
    _check_tau(tau)
    q = _as_unit_array(query_vec)
    pos = [_as_unit_array(p) for p in positives]
    neg = [_as_unit_array(n) for n in negatives]
    for v in (*pos, *neg):
        if v.shape != q.shape:
            raise DimsError("vectors must share dims")
    neg_logits = np.array([float(np.dot(q, n)) / tau for n in neg])
    pos_logits = sorted(float(np.dot(q, p)) / tau for p in pos)
    total = 0.0
    for lp in pos_logits:
        denom = _sorted_logsumexp(np.append(neg_logits, lp))
        total += denom - lp
    return total / len(pos)


def contrastive_loss_grad(query_vec, positives: Sequence, negatives: Sequence,
                          tau: float, adapter: LinearAdapter) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient w.r.t. the adapter weight matrix.

    The adapter acts on the query side: v = W q / ||W q||; positives and
    negatives are frozen.
    """
    _check_tau(tau)
    q = _as_unit_array(query_vec)
    pos = [_as_unit_array(p) for p in positives]
    neg = [_as_unit_array(n) for n in negatives]
    W = adapter.weight
    u = W @ q
    un = np.linalg.norm(u)
    if un == 0 or not np.isfinite(un):
        raise DomainError("adapter output cannot be normalized")
    v = u / un

    P = len(pos)
    s_pos = np.array([float(np.dot(v, p)) for p in pos])
    s_neg = np.array([float(np.dot(v, n)) for n in neg])
    neg_logits = s_neg / tau

    loss = 0.0
    dL_dv = np.zeros_like(v)
    for i in range(P):
        lp = s_pos[i] / tau
        denom = _sorted_logsumexp(np.append(neg_logits, lp))
        loss += denom - lp
        p_pos = np.exp(lp - denom)
        p_neg = np.exp(neg_logits - denom)
        dL_dv += (p_pos - 1.0) / tau * pos[i]
        for j, n in enumerate(neg):
            dL_dv += p_neg[j] / tau * n
    loss /= P
    dL_dv /= P

    # normalization Jacobian: dv/du = (I - v v^T) / ||u||
    dL_du = (dL_dv - v * float(np.dot(v, dL_dv))) / un
    grad_W = np.outer(dL_du, q)
    return loss, grad_W


def compose_total_loss(l_rep: float, l_qa_external: Optional[float] = None) -> LossReport:
    """Sum the contrastive loss with an externally reported QA loss scalar."""
    if not np.isfinite(l_rep) or l_rep < 0:
        raise DomainError(f"l_rep must be finite and >= 0, got {l_rep}")
    if l_qa_external is not None:
        if not np.isfinite(l_qa_external) or l_qa_external < 0:
            raise DomainError(f"l_qa_external must be finite and >= 0, got {l_qa_external}")
        return LossReport(l_rep, l_qa_external, l_rep + l_qa_external)
    return LossReport(l_rep, None, l_rep)


def sample_negatives(doc: ParsedDocument, positive_ids: Sequence[str],
                     rng: np.random.Generator) -> list[str]:
    """Uniformly pick 2 text + 2 image chunk ids outside the positive set.

    Degradation on short documents: a modality lacking 2 spare chunks is
    backfilled from the other; with fewer than 4 spares in total, all spares
    are used (at least 1 must exist).
    """
    positives = set(positive_ids)
    spare_text = [c.chunk_id for c in doc.text_chunks() if c.chunk_id not in positives]
    spare_image = [c.chunk_id for c in doc.image_chunks() if c.chunk_id not in positives]
    total = len(spare_text) + len(spare_image)
    if total == 0:
        raise ConfigError("document has no non-positive chunks to sample negatives from")
    if total <= 4:
        return spare_text + spare_image
    n_text = min(2, len(spare_text))
    n_image = min(2, len(spare_image))
    # backfill a modality's deficit from the other
    deficit = 4 - (n_text + n_image)
    if deficit > 0:
        extra = min(deficit, len(spare_text) - n_text)
        n_text += extra
        deficit -= extra
        n_image += min(deficit, len(spare_image) - n_image)
    picked = []
    if n_text:
        picked += list(rng.choice(spare_text, size=n_text, replace=False))
    if n_image:
        picked += list(rng.choice(spare_image, size=n_image, replace=False))
    return [str(p) for p in picked]


def train_adapter(batches: Sequence[TrainingBatch], config: TrainConfig,
                  init: Optional[LinearAdapter] = None) -> tuple[LinearAdapter, list[float]]:
    """Mini-batch gradient descent on the mean contrastive loss.

    Deterministic for a fixed (batches, config): per-epoch shuffling uses the
    config seed only. Returns the trained adapter and per-epoch mean loss.
    """
    if not batches:
        raise ConfigError("no training batches")
    dims = batches[0].query_vec.shape[0]
    adapter = LinearAdapter(init.weight.copy()) if init else LinearAdapter.identity(dims)
    rng = np.random.default_rng(config.seed)
    trajectory: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(batches))
        losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            group = [batches[i] for i in order[start:start + config.batch_size]]
            grad = np.zeros_like(adapter.weight)
            for b in group:
                try:
                    loss, g = contrastive_loss_grad(
                        b.query_vec, b.positive_vecs, b.negative_vecs,
                        config.temperature, adapter,
                    )
                except DomainError:
                    raise TrainingDivergedError(epoch)
                losses.append(loss)
                grad += g
            grad /= len(group)
            adapter.weight = adapter.weight - config.learning_rate * grad
        epoch_loss = float(np.mean(losses))
        if not np.isfinite(epoch_loss) or not np.all(np.isfinite(adapter.weight)):
            raise TrainingDivergedError(epoch)
        trajectory.append(epoch_loss)
    return adapter, trajectory
