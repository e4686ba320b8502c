from __future__ import annotations

import numpy as np


def dice_iou(predicted, truth) -> tuple[float, float]:
    """Dice and IoU of two binary masks; two empty masks score (1, 1)."""
    p = np.asarray(getattr(predicted, "pixels", predicted), dtype=bool)
    t = np.asarray(getattr(truth, "pixels", truth), dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    inter = np.count_nonzero(p & t)
    total = np.count_nonzero(p) + np.count_nonzero(t)
    union = np.count_nonzero(p | t)
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union
