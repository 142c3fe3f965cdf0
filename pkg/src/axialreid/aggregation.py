"""Mask-aware feature aggregation and the two training losses.

Per-frame feature maps are pooled over valid (non-padded) pixels only, averaged
over time, and batch-normalized; training uses batch-hard triplet loss on the
pre-BN feature and cross-entropy on the classifier output.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import as_tensor


def mask_downsample(mask, target_hw: tuple[int, int]) -> np.ndarray:
    """Downsample a (T, H, W) 0/1 validity mask to (T, H', W').

    An output cell is valid iff strictly more than half of its covered input
    pixels are valid. A frame whose downsampled mask is all zero falls back to
    all ones (so later pooling never divides by zero).
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise DimensionError(f"mask must be (T, H, W), got shape {mask.shape}")
    t, h, w = mask.shape
    th, tw = target_hw
    if th > h or tw > w or h % th or w % tw:
        raise DimensionError(f"target {target_hw} is not an integer pooling of ({h}, {w})")
    fh, fw = h // th, w // tw
    window = float(fh * fw)
    counts = mask.reshape(t, th, fh, tw, fw).sum(axis=(2, 4))
    out = (counts > window / 2.0).astype(np.float64)
    dead = out.reshape(t, -1).sum(axis=1) == 0
    out[dead] = 1.0
    return out


def masked_avg_pool(features, mask) -> np.ndarray:
    """Per-frame mean of feature vectors at valid cells: (T, C, H, W) x (T, H, W) -> (T, C)."""
    features = as_tensor(features, "features")
    mask = np.asarray(mask, dtype=np.float64)
    if features.ndim != 4 or mask.ndim != 3:
        raise DimensionError(f"expected (T, C, H, W) features and (T, H, W) mask, got {features.shape} and {mask.shape}")
    if features.shape[0] != mask.shape[0] or features.shape[2:] != mask.shape[1:]:
        raise DimensionError(f"features {features.shape} and mask {mask.shape} extents differ")
    counts = mask.sum(axis=(1, 2))
    if np.any(counts == 0):
        raise ValidationError("mask has a fully invalid frame; apply mask_downsample fallback first")
    summed = np.einsum("tchw,thw->tc", features, mask)
    return summed / counts[:, None]


def masked_avg_pool_backward(grad, mask) -> np.ndarray:
    """Gradient of masked_avg_pool w.r.t. features: (T, C) -> (T, C, H, W)."""
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=(1, 2))
    return np.einsum("tc,thw->tchw", grad / counts[:, None], mask)


class BatchNorm1d:
    """Feature-wise batch normalization with learned affine and running stats.

    Training mode normalizes with batch statistics and updates the running
    estimates; eval mode uses the running estimates.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = np.ones(dim, dtype=np.float64)
        self.beta = np.zeros(dim, dtype=np.float64)
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: np.ndarray, training: bool):
        x = as_tensor(x, "bn input")
        single = x.ndim == 1
        xb = x[None] if single else x
        if training:
            mean = xb.mean(axis=0)
            var = xb.var(axis=0)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xb - mean) * inv
        out = self.gamma * xhat + self.beta
        cache = dict(xhat=xhat, inv=inv, training=training, n=xb.shape[0])
        return (out[0] if single else out), cache

    def backward(self, grad: np.ndarray, cache: dict):
        """Returns (d_x, d_gamma, d_beta)."""
        single = grad.ndim == 1
        g = grad[None] if single else grad
        xhat, inv, n = cache["xhat"], cache["inv"], cache["n"]
        d_gamma = (g * xhat).sum(axis=0)
        d_beta = g.sum(axis=0)
        d_xhat = g * self.gamma
        if cache["training"]:
            d_x = (inv / n) * (n * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0))
        else:
            d_x = d_xhat * inv
        return (d_x[0] if single else d_x), d_gamma, d_beta


def aggregate(frame_feats, bn: BatchNorm1d, training: bool = False):
    """Tracklet representation: f_pre = temporal mean (feeds the triplet loss),
    f_post = BN(f_pre) (feeds the classifier)."""
    frame_feats = as_tensor(frame_feats, "frame features")
    if frame_feats.ndim != 2 or frame_feats.shape[0] < 1:
        raise DimensionError(f"expected (T, C) frame features with T >= 1, got {frame_feats.shape}")
    f_pre = frame_feats.mean(axis=0)
    f_post, _ = bn.forward(f_pre, training=training)
    return f_pre, f_post


def validate_pk_labels(labels: np.ndarray) -> tuple[int, int]:
    """Check the P identities x K instances batch structure; returns (P, K)."""
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        bad = ids[counts < 2].tolist()
        raise ValidationError(f"identities {bad} have no positive pair in the batch")
    if len(set(counts.tolist())) != 1:
        raise ValidationError(f"batch is not P x K: instance counts {dict(zip(ids.tolist(), counts.tolist()))}")
    return len(ids), int(counts[0])


def batch_hard_triplet(features, labels, margin: float = 0.3):
    """Batch-hard triplet loss with Euclidean distances.

    Per anchor: max(0, margin + hardest-positive distance - hardest-negative
    distance), averaged over anchors. Returns (loss, d_features).
    """
    features = as_tensor(features, "features")
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise DimensionError(f"features {features.shape} vs labels {labels.shape}")
    if margin < 0:
        raise ValidationError(f"margin must be >= 0, got {margin}")
    validate_pk_labels(labels)
    b = features.shape[0]
    diff = features[:, None, :] - features[None, :, :]
    sq = np.einsum("ijc,ijc->ij", diff, diff)
    dist = np.sqrt(np.maximum(sq, 0.0))
    same = labels[:, None] == labels[None, :]
    eye = np.eye(b, dtype=bool)

    loss = 0.0
    grad = np.zeros_like(features)
    for a in range(b):
        pos_mask = same[a] & ~eye[a]
        neg_mask = ~same[a]
        pos_idx = int(np.flatnonzero(pos_mask)[np.argmax(dist[a][pos_mask])])
        neg_idx = int(np.flatnonzero(neg_mask)[np.argmin(dist[a][neg_mask])])
        hinge = margin + dist[a, pos_idx] - dist[a, neg_idx]
        if hinge > 0:
            loss += hinge
            dp = max(dist[a, pos_idx], 1e-12)
            dn = max(dist[a, neg_idx], 1e-12)
            gp = (features[a] - features[pos_idx]) / dp
            gn = (features[a] - features[neg_idx]) / dn
            grad[a] += gp - gn
            grad[pos_idx] -= gp
            grad[neg_idx] += gn
    return loss / b, grad / b


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class.

    Returns (loss, d_logits); gradient rows are softmax - onehot over batch size.
    """
    logits = as_tensor(logits, "logits")
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    b, n = logits.shape
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValidationError(f"labels out of range [0, {n})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    loge = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -loge[np.arange(b), labels].mean()
    grad = np.exp(loge)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b
