"""Threshold / contour / ellipse segmentation of dark lumens."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from skimage.filters import threshold_isodata

MASK_SIZE = 256


@dataclass(frozen=True)
class LumenDetection:
    """One lumen found in a mask; pixel coordinates are (column, row) in mask space."""

    centroid_px: tuple[float, float]
    area_px: float
    ellipse: tuple  # ((cx, cy), (full_axis_1, full_axis_2), angle_deg), or None
    frame_index: int = -1

    def __post_init__(self):
        if self.area_px <= 0:
            raise ValueError("lumen area must be positive")

    def to_dict(self) -> dict:
        d = {
            "frame_index": self.frame_index,
            "centroid_px": [float(v) for v in self.centroid_px],
            "area_px": float(self.area_px),
            "ellipse": None,
        }
        if self.ellipse is not None:
            (cx, cy), (a, b), ang = self.ellipse
            d["ellipse"] = {"center": [float(cx), float(cy)], "axes": [float(a), float(b)], "angle": float(ang)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LumenDetection:
        e = d.get("ellipse")
        ell = None if e is None else (tuple(e["center"]), tuple(e["axes"]), float(e["angle"]))
        return cls(tuple(d["centroid_px"]), float(d["area_px"]), ell, int(d.get("frame_index", -1)))


@dataclass(frozen=True)
class ClassicalParams:
    size: int = MASK_SIZE
    threshold: float | None = None  # fixed override; None -> automatic `method`
    # "isodata" keeps the lowest intermeans fixed point; Otsu tends to split
    # the speckle background when lumens cover well under 1% of the frame
    method: str = "isodata"
    blur_sigma: float = 1.0
    open_kernel: int = 3
    # minimum (mu_bright - mu_dark) / within-class std for a frame to count as non-blank
    min_separation: float = 6.0


def resize_frame(pixels: np.ndarray, size: int = MASK_SIZE) -> np.ndarray:
    return cv2.resize(pixels, (size, size), interpolation=cv2.INTER_LINEAR)


def _class_separation(img: np.ndarray, thr: float) -> float:
    v = img.astype(float).ravel()
    dark = v <= thr
    if dark.all() or not dark.any():
        return 0.0
    w0, w1 = dark.mean(), 1.0 - dark.mean()
    within = w0 * v[dark].var() + w1 * v[~dark].var()
    return float((v[~dark].mean() - v[dark].mean()) / np.sqrt(max(within, 1e-12)))


def threshold_mask(pixels: np.ndarray, params: ClassicalParams = ClassicalParams()) -> np.ndarray:
    """Binary lumen mask at ``params.size`` resolution (True = dark lumen)."""
    small = resize_frame(pixels, params.size) if pixels.shape != (params.size, params.size) else pixels
    if params.blur_sigma > 0:
        small = cv2.GaussianBlur(small, (0, 0), params.blur_sigma)
    if int(small.max()) == int(small.min()):
        return np.zeros(small.shape, dtype=bool)
    if params.threshold is None:
        if params.method == "isodata":
            thr = float(threshold_isodata(small))
        elif params.method == "otsu":
            thr, _ = cv2.threshold(small, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
        else:
            raise ValueError(f"unknown threshold method {params.method!r}")
        if _class_separation(small, thr) < params.min_separation:
            return np.zeros(small.shape, dtype=bool)
    else:
        thr = params.threshold
    mask = (small <= thr).astype(np.uint8)
    if params.open_kernel > 1:
        k = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (params.open_kernel, params.open_kernel))
        mask = cv2.morphologyEx(mask, cv2.MORPH_OPEN, k)
    return mask.astype(bool)


def detect_lumens(mask: np.ndarray, frame_index: int = -1) -> list[LumenDetection]:
    """Fit an ellipse to every non-zero-area external contour of ``mask``.

    Contour points are boundary pixel centres, half a pixel inside the
    region edge, so fitted full axes are widened by one pixel. Contours too
    short for an ellipse fall back to the pixel centroid and pixel count.
    """
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    contours, _ = cv2.findContours(m, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    out = []
    for c in contours:
        if cv2.contourArea(c) <= 0:
            continue
        if len(c) >= 5:
            (cx, cy), (a, b), ang = cv2.fitEllipseDirect(c)
            a, b = a + 1.0, b + 1.0
            area = np.pi * a * b / 4.0
            if not (np.isfinite(cx) and np.isfinite(cy) and area > 0):
                continue
            out.append(LumenDetection((float(cx), float(cy)), float(area), ((cx, cy), (a, b), ang), frame_index))
        else:
            region = np.zeros_like(m)
            cv2.drawContours(region, [c], -1, 1, thickness=-1)
            ys, xs = np.nonzero(region)
            out.append(LumenDetection((float(xs.mean()), float(ys.mean())), float(len(xs)), None, frame_index))
    out.sort(key=lambda d: (d.centroid_px[0], d.centroid_px[1]))
    return out


def segment_frame(pixels: np.ndarray, params: ClassicalParams = ClassicalParams(), frame_index: int = -1):
    mask = threshold_mask(pixels, params)
    return mask, detect_lumens(mask, frame_index)
