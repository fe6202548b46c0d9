"""Cross-entropy, siamese-label losses and the mutual-learning KL term.

Labels are 0-based.  Group indices ``c`` are 1-based: group ``c`` owns columns
``[(c-1)*N, c*N)`` of the concatenated logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor


@dataclass(frozen=True)
class SiameseLogits:
    """Concatenated logits of ``n_groups`` heads, each with ``n_classes`` columns."""

    tensor: Tensor
    n_groups: int
    n_classes: int

    def group_columns(self, c: int) -> slice:
        return slice((c - 1) * self.n_classes, c * self.n_classes)


@dataclass(frozen=True)
class LossDiagnostics:
    """Target logit, log-sum-exp of the rest, and the two partials of CE."""

    z_y: float
    alpha: float
    d_zy: float
    d_alpha: float


def _labels(y, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label out of range 0..{n_classes - 1}")
    return y


def _weights(beta, n_groups: int) -> list[float]:
    beta = [float(b) for b in beta]
    if len(beta) != n_groups:
        raise ValueError(f"got {len(beta)} loss weights for {n_groups} groups")
    if any(b < 0 for b in beta) or not any(b > 0 for b in beta):
        raise ValueError(f"loss weights must be nonnegative and not all zero, got {beta}")
    return beta


def cross_entropy(z, y) -> Tensor:
    """Batch-mean of ``-z[y] + logsumexp(z)``."""
    z = ad.as_tensor(z)
    if z.values.ndim != 2:
        raise ad.ShapeError(f"cross_entropy: expected B x M logits, got shape {z.shape}")
    y = _labels(y, z.shape[0], z.shape[1])
    return ad.mean(ad.sub(ad.logsumexp(z), ad.pick(z, y)))


def loss_diagnostics(z, y: int) -> LossDiagnostics:
    """Closed-form CE partials for one sample, split into target and rest."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size < 2:
        raise ValueError("need at least two classes: alpha is undefined otherwise")
    y = int(y)
    if not 0 <= y < z.size:
        raise ValueError(f"label {y} out of range for {z.size} classes")
    rest = np.delete(z, y)
    alpha = float(kernels.row_logsumexp(rest[None, :])[0])
    z_y = float(z[y])
    d_alpha = 1.0 / (math.exp(z_y - alpha) + 1.0) if z_y - alpha < 700 else 0.0
    return LossDiagnostics(z_y=z_y, alpha=alpha, d_zy=-d_alpha, d_alpha=d_alpha)


def make_siamese(logit_groups: Sequence) -> SiameseLogits:
    groups = [ad.as_tensor(g) for g in logit_groups]
    if not groups:
        raise ValueError("make_siamese needs at least one logit group")
    shape = groups[0].shape
    if len(shape) != 2:
        raise ad.ShapeError(f"make_siamese: expected B x N logits, got shape {shape}")
    for g in groups[1:]:
        if g.shape != shape:
            raise ad.ShapeError(f"make_siamese: group shapes differ: {shape} vs {g.shape}")
    tensor = groups[0] if len(groups) == 1 else ad.concat(groups, axis=1)
    return SiameseLogits(tensor, len(groups), shape[1])


def _group_term(zbar: SiameseLogits, lse: Tensor, y: np.ndarray, c: int) -> Tensor:
    return ad.mean(ad.sub(lse, ad.pick(zbar.tensor, y + (c - 1) * zbar.n_classes)))


def _check_group(zbar: SiameseLogits, c: int) -> None:
    if not 1 <= c <= zbar.n_groups:
        raise ValueError(f"group index must be in 1..{zbar.n_groups}, got {c}")


def group_loss(zbar: SiameseLogits, y, c: int) -> Tensor:
    """CE over all ``C*N`` siamese columns with the label moved into group ``c``."""
    _check_group(zbar, c)
    y = _labels(y, zbar.tensor.shape[0], zbar.n_classes)
    return _group_term(zbar, ad.logsumexp(zbar.tensor), y, c)


def sila_terms(logit_groups: Sequence, y, beta) -> tuple[Tensor, list[Tensor]]:
    """Weighted SiLa total and the unweighted per-group losses.

    The row log-sum-exp over the siamese logits is shared by all groups.
    """
    zbar = make_siamese(logit_groups)
    beta = _weights(beta, zbar.n_groups)
    y = _labels(y, zbar.tensor.shape[0], zbar.n_classes)
    lse = ad.logsumexp(zbar.tensor)
    terms = [_group_term(zbar, lse, y, c) for c in range(1, zbar.n_groups + 1)]
    return _weighted_sum(terms, beta), terms


def sila_loss(logit_groups: Sequence, y, beta) -> Tensor:
    return sila_terms(logit_groups, y, beta)[0]


def _weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    total = None
    for t, w in zip(terms, weights):
        if w == 0:
            continue
        part = t if w == 1.0 else ad.scale(t, w)
        total = part if total is None else ad.add(total, part)
    return total


def independent_terms(logit_groups: Sequence, y, beta) -> tuple[Tensor, list[Tensor]]:
    """Weighted sum of each group's own N-class cross-entropy (no coupling)."""
    groups = [ad.as_tensor(g) for g in logit_groups]
    beta = _weights(beta, len(groups))
    terms = [cross_entropy(g, y) for g in groups]
    return _weighted_sum(terms, beta), terms


def dml_kl_loss(student, peer) -> Tensor:
    """Batch-mean ``KL(softmax(peer) || softmax(student))``; the peer is a constant.

    Uses ``KL = sum p log p - sum p z + logsumexp(z)`` since the peer
    distribution sums to one.
    """
    student = ad.as_tensor(student)
    peer_values = peer.values if isinstance(peer, Tensor) else np.asarray(peer, dtype=np.float64)
    if peer_values.shape != student.shape or student.values.ndim != 2:
        raise ad.ShapeError(
            f"dml_kl_loss: student {student.shape} and peer {peer_values.shape} differ"
        )
    p = kernels.row_softmax(peer_values)
    log_p = peer_values - kernels.row_logsumexp(peer_values)[:, None]
    neg_entropy = (p * log_p).sum(axis=1)
    cross = ad.sum_(ad.mul(student, p), axis=1)
    per_row = ad.add(ad.sub(ad.logsumexp(student), cross), neg_entropy)
    return ad.mean(per_row)


def dml_terms(logit_groups: Sequence, y, beta, lambda_dml: float = 1.0):
    """Mutual learning: per-network CE plus lambda times both KL directions."""
    if lambda_dml < 0:
        raise ValueError("lambda_dml must be nonnegative")
    f1, f2 = _pair(logit_groups)
    total, terms = independent_terms([f1, f2], y, beta)
    kl = _kl_both(f1, f2)
    total = _add_scaled(total, kl, lambda_dml)
    return total, terms + kl


def combined_terms(logit_groups: Sequence, y, beta, lambda_dml: float = 1.0):
    groups = list(logit_groups)
    if lambda_dml < 0:
        raise ValueError("lambda_dml must be nonnegative")
    total, terms = sila_terms(groups, y, beta)
    if lambda_dml == 0 and len(groups) != 2:
        return total, terms
    f1, f2 = _pair(groups)
    kl = _kl_both(f1, f2)
    return _add_scaled(total, kl, lambda_dml), terms + kl


def combined_loss(logit_groups: Sequence, y, beta, lambda_dml: float = 1.0) -> Tensor:
    """SiLa loss plus ``lambda_dml`` times the two detached-peer KL terms."""
    return combined_terms(logit_groups, y, beta, lambda_dml)[0]


def _pair(groups):
    if len(groups) != 2:
        raise ValueError(f"mutual-learning terms need exactly 2 networks, got {len(groups)}")
    return ad.as_tensor(groups[0]), ad.as_tensor(groups[1])


def _kl_both(f1: Tensor, f2: Tensor) -> list[Tensor]:
    # Peers enter as plain arrays, so no gradient reaches them through KL.
    return [dml_kl_loss(f1, f2.values.copy()), dml_kl_loss(f2, f1.values.copy())]


def _add_scaled(total: Tensor, extra: Sequence[Tensor], lam: float) -> Tensor:
    if lam == 0:
        return total
    s = ad.add(extra[0], extra[1])
    return ad.add(total, s if lam == 1.0 else ad.scale(s, lam))


LOSS_MODES = ("independent", "sila", "dml", "sila_dml")


def loss_for_mode(mode: str, logit_groups: Sequence, y, beta, lambda_dml: float = 1.0):
    """Dispatch to the joint loss of a training arm; returns ``(total, terms)``."""
    if mode == "independent":
        return independent_terms(logit_groups, y, beta)
    if mode == "sila":
        return sila_terms(logit_groups, y, beta)
    if mode == "dml":
        return dml_terms(logit_groups, y, beta, lambda_dml)
    if mode == "sila_dml":
        return combined_terms(logit_groups, y, beta, lambda_dml)
    raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")


def term_names(mode: str, n_groups: int) -> list[str]:
    if mode == "independent":
        return [f"ce{c}" for c in range(1, n_groups + 1)]
    if mode == "sila":
        return [f"group{c}" for c in range(1, n_groups + 1)]
    if mode == "dml":
        return ["ce1", "ce2", "kl12", "kl21"]
    if mode == "sila_dml":
        return ["group1", "group2", "kl12", "kl21"]
    raise ValueError(f"unknown loss mode {mode!r}")
