"""Training objectives with analytic gradients.

Everything here is dtype-preserving: float64 in, float64 out; long double in,
long double out. The gradient checkers rely on that to evaluate the numeric
side in extended precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pdscl.core import BatchMeta

DEFAULT_TAU = 0.5
DEFAULT_LAMBDA_PDSCL = 0.5
DEFAULT_LAMBDA_DAT = 0.2


@dataclass(frozen=True)
class LossOutput:
    """Scalar loss and its gradient with respect to the loss's input matrix."""

    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class DatLossOutput:
    """Class CE + weighted domain CE.

    ``grad_domain_logits`` already carries the weight; the model reverses its
    sign where it enters the shared encoder (see ``gradient_reversal``).
    """

    value: float
    grad_class_logits: np.ndarray
    grad_domain_logits: np.ndarray
    lam: float


@dataclass(frozen=True)
class PairMasks:
    positive: np.ndarray
    negative: np.ndarray


def _float_array(x) -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def l2_normalize(features):
    """Row-wise unit vectors. Returns ``(unit, norms)``; zero rows raise."""
    f = _float_array(features)
    norms = np.sqrt(np.sum(f * f, axis=-1))
    bad = np.argwhere(norms == 0)
    if bad.size:
        raise ValueError(f"cannot L2-normalize zero feature row {int(bad[0][-1])}")
    return f / norms[..., None], norms


def l2_normalize_backward(grad_unit, unit, norms):
    """Chain a gradient on unit rows back through ``f / ||f||``."""
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norms[..., None]


def similarity_matrix(unit_features, tau: float = DEFAULT_TAU) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    u = _float_array(unit_features)
    return (u @ np.swapaxes(u, -1, -2)) / tau


def build_pair_masks(meta: BatchMeta) -> PairMasks:
    """Positives: same label, different patient or domain. Negatives: different label.

    Pairs matching in label, patient and domain land in neither mask.
    """
    labels = meta.labels
    _, patients = np.unique(np.array(meta.patient_ids), return_inverse=True)
    domains = meta.domain_ids
    same_label = labels[:, None] == labels[None, :]
    other_source = (patients[:, None] != patients[None, :]) | (domains[:, None] != domains[None, :])
    positive = same_label & other_source
    negative = ~same_label
    np.fill_diagonal(positive, False)
    np.fill_diagonal(negative, False)
    return PairMasks(positive, negative)


def _masked_lse(s, mask):
    """Log-sum-exp along the last axis over ``mask``, plus the masked softmax.

    Rows with an empty mask give ``-inf`` and all-zero weights.
    """
    neg_inf = np.array(-np.inf, dtype=s.dtype)
    m = np.max(np.where(mask, s, neg_inf), axis=-1)
    m_safe = np.where(np.isfinite(m), m, 0)
    e = np.exp(np.where(mask, s - m_safe[..., None], neg_inf))
    total = np.sum(e, axis=-1)
    with np.errstate(divide="ignore"):
        lse = m_safe + np.log(total)
    weights = np.divide(e, total[..., None], out=np.zeros_like(e), where=total[..., None] > 0)
    return lse, weights


def pdscl_loss(features, meta: BatchMeta, tau: float = DEFAULT_TAU) -> LossOutput:
    """Patient/domain supervised contrastive loss and its gradient w.r.t. raw features.

    For each anchor with at least one positive,
    ``loss_i = LSE_{k in pos|neg}(s_ik) - LSE_{j in pos}(s_ij)``; the batch loss
    averages over those anchors only. The gradient is chained through the L2
    normalization, so it is taken w.r.t. the un-normalized rows.

    ``features`` is ``(N, D)`` or a stack ``(..., N, D)`` sharing one ``meta``.
    """
    f = _float_array(features)
    if f.ndim < 2 or f.shape[-2] < 2:
        raise ValueError("pdscl_loss needs an (N, D) feature matrix with N >= 2")
    if f.shape[-2] != len(meta):
        raise ValueError("features and batch metadata disagree on N")
    if tau <= 0:
        raise ValueError("temperature must be positive")

    masks = build_pair_masks(meta)
    active = masks.positive.any(axis=1)
    n_active = int(active.sum())
    if n_active == 0:
        return LossOutput(np.zeros(f.shape[:-2], dtype=f.dtype)[()], np.zeros_like(f))

    unit, norms = l2_normalize(f)
    s = similarity_matrix(unit, tau)
    contrast = masks.positive | masks.negative
    lse_pos, w_pos = _masked_lse(s, masks.positive)
    lse_all, w_all = _masked_lse(s, contrast)
    per_anchor = np.where(active, lse_all - np.where(active, lse_pos, 0), 0)
    value = np.sum(per_anchor, axis=-1) / n_active

    # d loss / d s_ik = (softmax over contrast set - softmax over positives) / n_active
    g_s = (w_all - w_pos) * active[:, None] / n_active
    g_unit = (g_s + np.swapaxes(g_s, -1, -2)) @ unit / tau
    return LossOutput(value, l2_normalize_backward(g_unit, unit, norms))


def _softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> LossOutput:
    """Mean ``-log softmax(z)[y]`` over the batch; gradient ``(softmax - onehot) / N``.

    ``logits`` is ``(N, 2)`` or a stack ``(..., N, 2)`` sharing one label vector.
    """
    z = _float_array(logits)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim < 2 or z.shape[-1] != 2:
        raise ValueError("cross_entropy expects (N, 2) logits")
    if y.shape != (z.shape[-2],):
        raise ValueError("one label per row required")
    if np.any((y < 0) | (y >= z.shape[-1])):
        raise ValueError("label out of range")
    n = z.shape[-2]
    onehot = np.eye(z.shape[-1], dtype=z.dtype)[y]
    shifted = z - np.max(z, axis=-1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=-1))
    picked = np.sum(shifted * onehot, axis=-1)
    value = np.sum(log_norm - picked, axis=-1) / n
    return LossOutput(value, (_softmax(z) - onehot) / n)


def total_loss_pdscl(ce: LossOutput, pd: LossOutput, lam: float = DEFAULT_LAMBDA_PDSCL) -> LossOutput:
    """``ce + lam * pd``. The two gradients must live on the same tensor."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return LossOutput(ce.value + lam * pd.value, ce.grad + lam * pd.grad)


def gradient_reversal(grad, scale: float = 1.0):
    """Backward pass of a gradient reversal layer: identity forward, ``-scale * g`` backward."""
    return -scale * grad


def dat_loss(class_logits, domain_logits, meta: BatchMeta, lam: float = DEFAULT_LAMBDA_DAT) -> DatLossOutput:
    """Class cross-entropy plus ``lam`` times domain cross-entropy."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ce = cross_entropy(class_logits, meta.labels)
    da = cross_entropy(domain_logits, meta.domain_ids)
    return DatLossOutput(ce.value + lam * da.value, ce.grad, lam * da.grad, lam)
