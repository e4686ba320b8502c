"""Forward pass of the memory-attention read and gated fusion.

Tensors are ``(channels, H, W)`` numpy arrays; memory quantities gain a
leading slot axis. ``x`` indexes rows and ``y`` columns. For a search window
of size ``(2h+1, 2w+1)`` displacements ``(n, m)`` are flattened row-major,
``n`` outer, into the displacement axis ``D``.

Displacements that land outside the frame are excluded rather than
zero-padded: their correlation is ``-inf`` and their probability exactly 0.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .. import io

INDEXING = ("verbatim", "query-centered")


def window_halves(window) -> tuple[int, int]:
    if np.isscalar(window):
        window = (int(window), int(window))
    wh, ww = (int(v) for v in window)
    if wh < 1 or ww < 1 or wh % 2 == 0 or ww % 2 == 0:
        raise ValueError(f"window sizes must be positive odd integers, got {window}")
    return wh // 2, ww // 2


def displacements(window) -> list[tuple[int, int]]:
    h, w = window_halves(window)
    return [(n, m) for n in range(-h, h + 1) for m in range(-w, w + 1)]


def _shifted(T: np.ndarray, n: int, m: int) -> np.ndarray:
    """``out[..., x, y] = T[..., x+n, y+m]``, zero outside the frame."""
    out = np.zeros_like(T)
    H, W = T.shape[-2:]
    xs, xe = max(0, -n), min(H, H - n)
    ys, ye = max(0, -m), min(W, W - m)
    if xs < xe and ys < ye:
        out[..., xs:xe, ys:ye] = T[..., xs + n : xe + n, ys + m : ye + m]
    return out


def valid_displacements(shape, window) -> np.ndarray:
    """Boolean ``(D, H, W)``: is ``(x+n, y+m)`` inside the frame."""
    H, W = shape
    x = np.arange(H)[:, None]
    y = np.arange(W)[None, :]
    return np.array([(x + n >= 0) & (x + n < H) & (y + m >= 0) & (y + m < W) for n, m in displacements(window)])


def correlate(K_M: np.ndarray, K_Q: np.ndarray, window=5, indexing: str = "verbatim") -> np.ndarray:
    """Local correlation ``X[d, x, y] = K_M(x, y) . K_Q(x+n, y+m)``.

    ``indexing="query-centered"`` evaluates ``K_Q(x, y) . K_M(x+n, y+m)``
    instead, i.e. the memory is searched around each query location.
    Returns ``(D, H, W)`` with ``-inf`` at out-of-frame displacements.
    """
    K_M = np.asarray(K_M, dtype=float)
    K_Q = np.asarray(K_Q, dtype=float)
    if K_M.shape != K_Q.shape or K_M.ndim != 3:
        raise ValueError(f"key tensors must share a (C, H, W) shape, got {K_M.shape} and {K_Q.shape}")
    if indexing not in INDEXING:
        raise ValueError(f"indexing must be one of {INDEXING}")
    a, b = (K_M, K_Q) if indexing == "verbatim" else (K_Q, K_M)
    X = np.stack([np.einsum("cxy,cxy->xy", a, _shifted(b, n, m)) for n, m in displacements(window)])
    X[~valid_displacements(K_M.shape[1:], window)] = -np.inf
    return X


def attention_probabilities(X) -> np.ndarray:
    """Softmax over slots and displacements jointly at every pixel.

    ``X`` is ``(S, D, H, W)`` (or a list of ``(D, H, W)``). Pixels with no
    finite entry get all-zero probabilities.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected (S, D, H, W) correlations, got shape {X.shape}")
    finite = np.isfinite(X)
    mx = np.where(finite, X, -np.inf).max(axis=(0, 1), keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    E = np.where(finite, np.exp(np.where(finite, X, 0.0) - mx), 0.0)
    Z = E.sum(axis=(0, 1), keepdims=True)
    return np.divide(E, Z, out=np.zeros_like(E), where=Z > 0)


def memory_read(P: np.ndarray, V_M: np.ndarray, window=5) -> np.ndarray:
    """``Vt[c, x, y] = sum_s sum_(n,m) P[s, d, x, y] * V_M[s, c, x+n, y+m]``."""
    P = np.asarray(P, dtype=float)
    V_M = np.asarray(V_M, dtype=float)
    if P.ndim == 3:
        P = P[None]
    if V_M.ndim == 3:
        V_M = V_M[None]
    disp = displacements(window)
    if P.shape[0] != V_M.shape[0] or P.shape[1] != len(disp) or P.shape[2:] != V_M.shape[2:]:
        raise ValueError(
            f"probabilities {P.shape} do not match values {V_M.shape} for a {len(disp)}-displacement window"
        )
    out = np.zeros(V_M.shape[1:])
    for d, (n, m) in enumerate(disp):
        out += np.einsum("sxy,scxy->cxy", P[:, d], _shifted(V_M, n, m))
    return out


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1, zero-padded 3x3 cross-correlation: ``(Cin, H, W) -> (Cout, H, W)``."""
    Cout, Cin, kh, kw = weight.shape
    if x.shape[0] != Cin:
        raise ValueError(f"conv expects {Cin} input channels, got {x.shape[0]}")
    H, W = x.shape[1:]
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.broadcast_to(bias[:, None, None], (Cout, H, W)).copy()
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("oc,cxy->oxy", weight[:, :, i, j], xp[:, i : i + H, j : j + W])
    return out


def sigmoid(z):
    # split by sign to avoid exp overflow
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


FUSION_LAYERS = ("A_Q", "A_M", "E_Q", "E_M")


@dataclass(frozen=True, eq=False)
class FusionWeights:
    """3x3 conv layers of the two gated branches, each a ``(weight, bias)`` pair."""

    A_Q: tuple[np.ndarray, np.ndarray]
    A_M: tuple[np.ndarray, np.ndarray]
    E_Q: tuple[np.ndarray, np.ndarray]
    E_M: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        shapes = {name: np.shape(getattr(self, name)[0]) for name in FUSION_LAYERS}
        ref = shapes["A_Q"]
        if len(ref) != 4 or ref[2:] != (3, 3):
            raise ValueError(f"fusion kernels must be (Cout, Cin, 3, 3), got {ref}")
        for name, shape in shapes.items():
            if shape != ref:
                raise ValueError(f"layer {name} has weight shape {shape}, expected {ref}")
            b = np.shape(getattr(self, name)[1])
            if b != (ref[0],):
                raise ValueError(f"layer {name} has bias shape {b}, expected {(ref[0],)}")

    @property
    def in_channels(self) -> int:
        return self.A_Q[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.A_Q[0].shape[0]

    @classmethod
    def random(cls, in_channels: int = 32, out_channels: int = 256, seed: int = 0, scale: float | None = None):
        rng = np.random.default_rng(seed)
        scale = scale if scale is not None else 1.0 / np.sqrt(9 * in_channels)
        layers = {}
        for name in FUSION_LAYERS:
            layers[name] = (
                rng.normal(0.0, scale, size=(out_channels, in_channels, 3, 3)),
                rng.normal(0.0, 0.1, size=out_channels),
            )
        return cls(**layers)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in FUSION_LAYERS:
            w, b = getattr(self, name)
            out[f"{name}.weight"] = w
            out[f"{name}.bias"] = b
        return out

    def save(self, stem) -> None:
        io.write_tensors(stem, self.tensors(), kind="fusion")

    @classmethod
    def load(cls, stem, in_channels: int | None = None, out_channels: int | None = None) -> FusionWeights:
        tensors, _ = io.read_tensors(stem)
        return cls.from_tensors(tensors, in_channels, out_channels)

    @classmethod
    def from_tensors(cls, tensors, in_channels=None, out_channels=None) -> FusionWeights:
        layers = {}
        for name in FUSION_LAYERS:
            w, b = tensors[f"{name}.weight"], tensors[f"{name}.bias"]
            if in_channels is not None and out_channels is not None:
                exp = (out_channels, in_channels, 3, 3)
                if tuple(w.shape) != exp:
                    raise ValueError(f"{name}.weight: expected shape {exp}, file has {tuple(w.shape)}")
            layers[name] = (w, b)
        return cls(**layers)


def fuse(V_Q: np.ndarray, V_M_read: np.ndarray, weights: FusionWeights) -> np.ndarray:
    """Gated fusion ``sig(A_Q(z)) * E_Q(z) + sig(A_M(z)) * E_M(z)``, z = [V_Q; Vt_M]."""
    if V_Q.shape[1:] != V_M_read.shape[1:]:
        raise ValueError(f"V_Q {V_Q.shape} and memory read {V_M_read.shape} differ in H x W")
    z = np.concatenate([V_Q, V_M_read], axis=0)
    gq = sigmoid(conv3x3(z, *weights.A_Q))
    gm = sigmoid(conv3x3(z, *weights.A_M))
    return gq * conv3x3(z, *weights.E_Q) + gm * conv3x3(z, *weights.E_M)


class MemoryBank:
    """FIFO store of (key, value) features from preceding frames."""

    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise ValueError("memory capacity must be at least 1")
        self.capacity = capacity
        self._slots: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._slots)

    def push(self, key: np.ndarray, value: np.ndarray, frame_index: int | None = None) -> None:
        if self._slots and key.shape[1:] != self._slots[0][0].shape[1:]:
            raise ValueError("all memory slots must share H x W")
        self._slots.append((key, value, frame_index))

    @property
    def frame_indices(self) -> list:
        return [f for _, _, f in self._slots]

    @property
    def keys(self) -> np.ndarray:
        return np.stack([k for k, _, _ in self._slots])

    @property
    def values(self) -> np.ndarray:
        return np.stack([v for _, v, _ in self._slots])

    def read(self, K_Q: np.ndarray, value_channels: int, window=5, indexing: str = "verbatim") -> np.ndarray:
        """Memory read for a query key; zeros when the bank is empty."""
        if not self._slots:
            return np.zeros((value_channels,) + K_Q.shape[1:])
        X = np.stack([correlate(k, K_Q, window, indexing) for k, _, _ in self._slots])
        return memory_read(attention_probabilities(X), self.values, window)
