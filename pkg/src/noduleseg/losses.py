"""Training objectives: CE, Dice, uncertainty-masked cross-teaching.

Each loss comes in two flavors: a value-only function and a ``*_with_grad``
variant returning (value, d_loss/d_logits). Gradients are analytic (softmax
algebra), computed in float64 regardless of input dtype, and are what the
training loop feeds back into the networks.

Conventions fixed here:
  - CE is the mean of -log softmax over included pixels; with a weight mask,
    "included" means mask==1, and a mask selecting zero pixels gives exactly
    0 (a fully-certain image contributes no cross-teaching signal).
  - Dice uses the foreground softmax channel only, sums over the flattened
    batch, and smooths with eps=1e-5 in numerator and denominator.
  - Cross-teaching pseudo-labels are hard argmax constants: no gradient
    flows through the teacher, ties resolve to background.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

DICE_EPS = 1e-5


@dataclass
class LossReport:
    l_sup: float
    l_ct_u: float
    l_total: float
    lam: float


def _log_softmax(logits):
    z = logits.astype(np.float64, copy=False)
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def _check_targets(logits, target, weight_mask):
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ValidationError(f"expected Bx2xHxW logits, got shape {logits.shape}")
    expected = (logits.shape[0], logits.shape[2], logits.shape[3])
    if target.shape != expected:
        raise ValidationError(f"target shape {target.shape} does not match logits {expected}")
    if not np.isin(target, (0, 1)).all():
        raise ValidationError("target labels must be in {0, 1}")
    if weight_mask is not None:
        if weight_mask.shape != expected:
            raise ValidationError(
                f"weight mask shape {weight_mask.shape} does not match logits {expected}"
            )
        if not np.isin(weight_mask, (0, 1)).all():
            raise ValidationError("weight mask values must be in {0, 1}")


def ce_loss_with_grad(logits, target, weight_mask=None):
    """Masked cross-entropy and its gradient w.r.t. the logits."""
    _check_targets(logits, target, weight_mask)
    logp = _log_softmax(logits)
    tgt = target.astype(np.intp)
    nll = -np.take_along_axis(logp, tgt[:, None], axis=1)[:, 0]
    if weight_mask is None:
        scale = np.full(nll.shape, 1.0 / nll.size)
    else:
        count = float(weight_mask.sum())
        if count == 0.0:
            return 0.0, np.zeros(logits.shape, dtype=np.float64)
        scale = weight_mask.astype(np.float64) / count
    value = float((nll * scale).sum())
    # d(-log p_t)/d logits = softmax - onehot(t), per pixel
    grad = np.exp(logp)
    np.put_along_axis(grad, tgt[:, None], np.take_along_axis(grad, tgt[:, None], axis=1) - 1.0, axis=1)
    grad *= scale[:, None]
    return value, grad


def ce_loss(logits, target, weight_mask=None):
    return ce_loss_with_grad(logits, target, weight_mask)[0]


def dice_loss_with_grad(logits, target):
    """Batch-flattened foreground Dice loss and its gradient."""
    _check_targets(logits, target, None)
    logp = _log_softmax(logits)
    p = np.exp(logp[:, 1])
    g = target.astype(np.float64)
    inter = float((p * g).sum())
    denom = float(p.sum() + g.sum()) + DICE_EPS
    num = 2.0 * inter + DICE_EPS
    value = 1.0 - num / denom
    # d/dp_i [1 - num/denom] = -(2*g_i*denom - num) / denom^2
    dp = -(2.0 * g * denom - num) / (denom * denom)
    dfg = dp * p * (1.0 - p)  # softmax jacobian, 2-class
    grad = np.empty(logits.shape, dtype=np.float64)
    grad[:, 1] = dfg
    grad[:, 0] = -dfg
    return value, grad


def dice_loss(logits, target):
    return dice_loss_with_grad(logits, target)[0]


def supervised_loss_with_grad(f1_logits, f2_logits, y_int, y_uni):
    """CE+Dice with the intersection label for F1 and the union label for F2.

    Returns (value, grad_f1, grad_f2).
    """
    ce1, dce1 = ce_loss_with_grad(f1_logits, y_int)
    di1, ddi1 = dice_loss_with_grad(f1_logits, y_int)
    ce2, dce2 = ce_loss_with_grad(f2_logits, y_uni)
    di2, ddi2 = dice_loss_with_grad(f2_logits, y_uni)
    return ce1 + di1 + ce2 + di2, dce1 + ddi1, dce2 + ddi2


def supervised_loss(f1_logits, f2_logits, y_int, y_uni):
    return supervised_loss_with_grad(f1_logits, f2_logits, y_int, y_uni)[0]


def hard_argmax(logits):
    """Per-pixel argmax with ties resolving to background (label 0)."""
    return (logits[:, 1] > logits[:, 0]).astype(np.uint8)


def cross_teaching_loss_with_grad(f1_logits, f2_logits, u):
    """Each net is supervised by the other's hard prediction inside u.

    The pseudo-labels are constants: grad_f1 ignores the dependence of
    argmax(f2) on f2 and vice versa.
    """
    y_pl1 = hard_argmax(f1_logits)
    y_pl2 = hard_argmax(f2_logits)
    v1, g1 = ce_loss_with_grad(f1_logits, y_pl2, u)
    v2, g2 = ce_loss_with_grad(f2_logits, y_pl1, u)
    return v1 + v2, g1, g2


def cross_teaching_loss(f1_logits, f2_logits, u):
    return cross_teaching_loss_with_grad(f1_logits, f2_logits, u)[0]


def total_loss(sup, ct_u, lam):
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return sup + lam * ct_u
