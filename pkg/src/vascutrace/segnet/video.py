"""Per-recording segmentation with the classical or the attention-reference backend.

The attention-reference backend wires fixed, seeded stand-ins for the
encoder and decoder around the exact memory read and fusion math, so the
memory pipeline runs end to end on real frame sequences. Its masks are not
meant to be accurate; nothing in it is trained.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .. import io
from .attention import INDEXING, FusionWeights, MemoryBank, fuse, sigmoid
from .classical import MASK_SIZE, ClassicalParams, LumenDetection, detect_lumens, resize_frame, threshold_mask

BACKENDS = ("classical", "attention-ref")


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    pixels: np.ndarray
    source_frame_index: int


@dataclass(frozen=True)
class SegmentParams:
    classical: ClassicalParams = ClassicalParams()
    stub_seed: int = 0
    memory_capacity: int = 4
    window: int = 5
    feature_hw: int = 16
    encoder_channels: int = 256
    key_channels: int = 128
    value_channels: int = 16
    indexing: str = "verbatim"
    jobs: int = 1


@dataclass
class FrameSegmentation:
    mask: SegmentationMask
    detections: list[LumenDetection] = field(default_factory=list)


class StubNetwork:
    """Seeded random projections standing in for the image encoder and mask decoder."""

    N_INPUT = 4  # pooled mean, darkness, local std, constant

    def __init__(self, params: SegmentParams = SegmentParams(), weights: dict | None = None):
        self.params = params
        if weights is None:
            rng = np.random.default_rng(params.stub_seed)
            C = params.encoder_channels
            weights = {
                "encoder": rng.normal(0.0, 1.0, (C, self.N_INPUT)),
                "key": rng.normal(0.0, 1.0 / np.sqrt(C * params.key_channels), (params.key_channels, C)),
                "value": rng.normal(0.0, 1.0 / np.sqrt(C), (params.value_channels, C)),
                "decoder.weight": rng.normal(0.0, 1.0 / np.sqrt(C), (1, C)),
                "decoder.bias": np.zeros(1),
            }
            fusion = FusionWeights.random(2 * params.value_channels, C, seed=params.stub_seed + 1)
            weights.update(fusion.tensors())
        self.weights = weights
        self.fusion = FusionWeights.from_tensors(weights, 2 * params.value_channels, params.encoder_channels)

    def save(self, stem) -> None:
        p = self.params
        io.write_tensors(
            stem,
            self.weights,
            kind="attention-ref-stub",
            feature_hw=[p.feature_hw, p.feature_hw],
            encoder_channels=p.encoder_channels,
            key_channels=p.key_channels,
            value_channels=p.value_channels,
            window=p.window,
            memory_capacity=p.memory_capacity,
        )

    @classmethod
    def load(cls, stem, params: SegmentParams = SegmentParams()) -> StubNetwork:
        tensors, _ = io.read_tensors(stem)
        expect = {
            "encoder": (params.encoder_channels, cls.N_INPUT),
            "key": (params.key_channels, params.encoder_channels),
            "value": (params.value_channels, params.encoder_channels),
            "decoder.weight": (1, params.encoder_channels),
        }
        for name, shape in expect.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, file has {tuple(tensors[name].shape)}")
        return cls(params, tensors)

    def encode(self, image: np.ndarray):
        """``image`` (S, S) uint8 -> (encoder features, key, value) at feature_hw x feature_hw."""
        hw = self.params.feature_hw
        x = image.astype(float) / 255.0
        b = x.shape[0] // hw
        blocks = x[: b * hw, : b * hw].reshape(hw, b, hw, b)
        mean = blocks.mean(axis=(1, 3))
        std = blocks.std(axis=(1, 3))
        feats = np.stack([mean, 1.0 - mean, std, np.ones_like(mean)])
        E = np.tanh(np.einsum("ck,kxy->cxy", self.weights["encoder"], feats))
        K = np.einsum("kc,cxy->kxy", self.weights["key"], E)
        V = np.einsum("vc,cxy->vxy", self.weights["value"], E)
        return E, K, V

    def decode(self, F: np.ndarray, size: int) -> np.ndarray:
        logits = np.einsum("oc,cxy->oxy", self.weights["decoder.weight"], F)[0] + self.weights["decoder.bias"][0]
        prob = sigmoid(logits)
        return cv2.resize((prob > 0.5).astype(np.uint8), (size, size), interpolation=cv2.INTER_NEAREST).astype(bool)


def _frames_of(recording):
    if hasattr(recording, "entries"):
        return [e.frame.pixels for e in recording.entries]
    return [getattr(f, "pixels", f) for f in recording]


def segment_video(recording, backend: str = "classical", params: SegmentParams = SegmentParams(), network: StubNetwork | None = None):
    """Segment every frame of a recording.

    Returns one :class:`FrameSegmentation` per frame, in order. The
    attention-reference backend runs strictly sequentially because the FIFO
    memory is order dependent; the classical backend may use ``params.jobs``
    threads.
    """
    frames = _frames_of(recording)
    if not frames:
        raise ValueError("recording has no frames")
    size = params.classical.size
    if backend == "classical":

        def one(k):
            mask = threshold_mask(frames[k], params.classical)
            return FrameSegmentation(SegmentationMask(mask, k), detect_lumens(mask, k))

        if params.jobs > 1:
            with ThreadPoolExecutor(max_workers=params.jobs) as pool:
                return list(pool.map(one, range(len(frames))))
        return [one(k) for k in range(len(frames))]
    if backend != "attention-ref":
        raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")
    if params.indexing not in INDEXING:
        raise ValueError(f"indexing must be one of {INDEXING}")

    net = network or StubNetwork(params)
    bank = MemoryBank(params.memory_capacity)
    out = []
    for k, pixels in enumerate(frames):
        img = resize_frame(pixels, size)
        _, K_Q, V_Q = net.encode(img)
        V_read = bank.read(K_Q, params.value_channels, params.window, params.indexing)
        F = fuse(V_Q, V_read, net.fusion)
        mask = net.decode(F, size)
        out.append(FrameSegmentation(SegmentationMask(mask, k), detect_lumens(mask, k)))
        bank.push(K_Q, V_Q, k)
    return out


def write_segmentation(results, directory, comments=()) -> Path:
    directory = Path(directory)
    rows = []
    for r in results:
        io.write_pgm(directory / "masks" / f"{r.mask.source_frame_index:06d}.pgm", r.mask.pixels, comments)
        rows.extend(d.to_dict() for d in r.detections)
    io.write_jsonl(directory / "detections.jsonl", rows)
    return directory


def read_detections(path) -> list[LumenDetection]:
    return [LumenDetection.from_dict(d) for d in io.read_jsonl(path)]
