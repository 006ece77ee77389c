import torch
import torch.nn.functional as F


def _check(logits, labels):
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{int(labels.min())}, {int(labels.max())}]")


def soft_dice_per_class(probs, onehot, valid, smooth=1e-5):
    """Batch soft Dice per class, shape (K,); masked voxels are ignored."""
    dims = [0, *range(2, probs.dim())]
    p = probs * valid
    g = onehot * valid
    inter = (p * g).sum(dims)
    denom = p.sum(dims) + g.sum(dims)
    return (2 * inter + smooth) / (denom + smooth)


def seg_loss(logits, labels, valid=None, smooth=1e-5, include_background=False,
             dice_weight=1.0, ce_weight=1.0, return_parts=False):
    """Soft-Dice loss (mean over foreground classes) plus voxel-mean cross-entropy.

    ``logits`` is (N, K, *spatial), ``labels`` is (N, *spatial) integer.
    ``valid`` optionally masks voxels out of both terms; with every voxel
    masked the loss is exactly zero.
    """
    _check(logits, labels)
    labels = labels.long()
    k = logits.shape[1]
    if valid is None:
        valid = torch.ones_like(labels, dtype=logits.dtype)
    else:
        valid = valid.to(logits.dtype)
    ce_map = F.cross_entropy(logits, labels, reduction="none")
    ce = (ce_map * valid).sum() / valid.sum().clamp(min=1.0)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels, k).movedim(-1, 1).to(logits.dtype)
    dice = soft_dice_per_class(probs, onehot, valid.unsqueeze(1), smooth)
    if not include_background and k > 1:
        dice = dice[1:]
    dice_term = 1 - dice.mean()
    total = dice_weight * dice_term + ce_weight * ce
    if return_parts:
        return total, {"dice": dice_term, "ce": ce}
    return total
