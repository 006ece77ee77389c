import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class PredictionMap:
    probabilities: np.ndarray  # (K, *spatial)
    labels: np.ndarray

    @property
    def confidence(self):
        return self.probabilities.max(axis=0)


def window_starts(size, patch, overlap):
    """Evenly spaced window origins covering ``size`` (size >= patch)."""
    if size <= patch:
        return [0]
    step = patch * (1 - overlap)
    n = math.ceil((size - patch) / step) + 1
    return sorted({int(round(i * (size - patch) / (n - 1))) for i in range(n)})


@torch.no_grad()
def sliding_window(image, net, patch, num_classes, overlap=0.5, batch_size=16):
    """Average softmax probabilities of overlapping windows over an N-D image."""
    shape = image.shape
    pads = [max(p - s, 0) for s, p in zip(shape, patch)]
    padded = np.pad(image, [(p // 2, p - p // 2) for p in pads])
    pshape = padded.shape
    starts = [window_starts(s, p, overlap) for s, p in zip(pshape, patch)]
    probs = np.zeros((num_classes, *pshape), dtype=np.float64)
    counts = np.zeros(pshape, dtype=np.float64)
    boxes = [tuple(slice(o, o + p) for o, p in zip(origin, patch)) for origin in itertools.product(*starts)]
    dtype = next(net.parameters()).dtype
    for i in range(0, len(boxes), batch_size):
        chunk = boxes[i : i + batch_size]
        x = torch.from_numpy(np.stack([padded[b] for b in chunk])[:, None]).to(dtype)
        p = torch.softmax(net(x), dim=1).double().numpy()
        for b, pb in zip(chunk, p):
            probs[(slice(None), *b)] += pb
            counts[b] += 1
    probs /= counts
    crop = tuple(slice(p // 2, p // 2 + s) for p, s in zip(pads, shape))
    return probs[(slice(None), *crop)]


def predict(volume, model, window_overlap=None, batch_size=16) -> PredictionMap:
    """Full-volume class probabilities via sliding windows (per slice for 2D models)."""
    cfg = model.cfg
    overlap = cfg.window_overlap if window_overlap is None else window_overlap
    img = np.asarray(getattr(volume, "intensities", volume), dtype=np.float32)
    was_training = model.training
    model.eval()
    try:
        if cfg.dims == 2:
            # treat slices as a batch dimension: one 3D window of depth 1
            probs = sliding_window(img, _SliceNet(model), (1, *cfg.patch), cfg.num_classes, overlap, batch_size)
        else:
            probs = sliding_window(img, model, cfg.patch, cfg.num_classes, overlap, batch_size)
    finally:
        model.train(was_training)
    probs = probs.astype(np.float32)
    return PredictionMap(probs, probs.argmax(axis=0).astype(np.uint8))


class _SliceNet(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, x):  # (B, 1, 1, H, W) -> (B, K, 1, H, W)
        return self.model(x[:, :, 0]).unsqueeze(2)
