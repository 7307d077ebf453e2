"""Class-prototype memory and query-conditioned guidance synthesis.

Prototypes are EMA-distilled reference vectors, one slot per category. They
are plain buffers: no gradient ever reaches them (stop-gradient boundary).
The mixture predictor maps a query descriptor to per-category logits; the
guidance vector is a softmax mixture over prototypes (or the nearest / the
ground-truth prototype in the ablation modes).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .tensor import Tensor, matmul, softmax

_SNAP_MAGIC = b"PM01"


class MemoryError_(ValueError):
    """Raised for invalid prototype-memory operations or corrupt snapshots."""


class PrototypeMemory:
    """K x C prototype matrix with momentum and per-slot init flags.

    The first write to a slot assigns the reference vector directly; later
    writes blend with momentum ``mu``:  m_y <- mu * m_y + (1 - mu) * r.
    Update arithmetic runs in float64 and is rounded to float32 storage so
    long update chains stay within closed-form tolerances.
    """

    def __init__(self, num_categories: int, channels: int, momentum: float = 0.99,
                 category_names=None):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be inside (0, 1), got {momentum}")
        if num_categories < 1 or channels < 1:
            raise ValueError("num_categories and channels must be positive")
        self.prototypes = np.zeros((num_categories, channels), dtype=np.float32)
        self.initialized = np.zeros(num_categories, dtype=bool)
        self.momentum = float(momentum)
        self.category_names = list(category_names) if category_names else [
            str(k) for k in range(num_categories)]

    @property
    def num_categories(self) -> int:
        return self.prototypes.shape[0]

    @property
    def channels(self) -> int:
        return self.prototypes.shape[1]

    def any_initialized(self) -> bool:
        return bool(self.initialized.any())

    def ema_update(self, r, y: int) -> None:
        """Fold reference vector ``r`` into slot ``y``; other slots untouched."""
        if not 0 <= y < self.num_categories:
            raise MemoryError_(f"category id {y} out of range [0, {self.num_categories})")
        r = np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float64).reshape(-1)
        if r.shape[0] != self.channels:
            raise MemoryError_(f"reference width {r.shape[0]} != memory width {self.channels}")
        if not np.isfinite(r).all():
            raise MemoryError_("non-finite reference vector")
        if not self.initialized[y]:
            self.prototypes[y] = r.astype(np.float32)
            self.initialized[y] = True
        else:
            mu = self.momentum
            blended = mu * self.prototypes[y].astype(np.float64) + (1.0 - mu) * r
            self.prototypes[y] = blended.astype(np.float32)

    # -- snapshot -------------------------------------------------------------

    def snapshot(self) -> bytes:
        """Serialize prototypes, momentum, and flags bit-exactly."""
        k, c = self.prototypes.shape
        head = _SNAP_MAGIC + struct.pack("<IId", k, c, self.momentum)
        flags = self.initialized.astype(np.uint8).tobytes()
        payload = self.prototypes.astype("<f4").tobytes()
        body = head + flags + payload
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def restore(cls, record: bytes) -> "PrototypeMemory":
        if len(record) < 20:
            raise MemoryError_(f"snapshot truncated at byte {len(record)}: header needs 20 bytes")
        if record[:4] != _SNAP_MAGIC:
            raise MemoryError_(f"bad snapshot magic at byte 0: {record[:4]!r}")
        k, c, mu = struct.unpack_from("<IId", record, 4)
        need = 20 + k + 4 * k * c + 4
        if len(record) < need:
            raise MemoryError_(f"snapshot truncated at byte {len(record)}: need {need} bytes")
        body, (crc,) = record[:need - 4], struct.unpack_from("<I", record, need - 4)
        if zlib.crc32(body) != crc:
            raise MemoryError_(f"snapshot CRC mismatch at byte {need - 4}")
        mem = cls(k, c, momentum=mu)
        mem.initialized = np.frombuffer(record, dtype=np.uint8, count=k, offset=20).astype(bool)
        mem.prototypes = np.frombuffer(record, dtype="<f4", count=k * c,
                                       offset=20 + k).reshape(k, c).copy()
        return mem


class MixturePredictor:
    """Two linear layers with ReLU mapping a query descriptor to K logits."""

    def __init__(self, channels: int, num_categories: int,
                 rng: np.random.Generator | None = None, hidden: int | None = None):
        hidden = hidden or channels
        rng = rng or np.random.default_rng(0)
        s1 = float(np.sqrt(2.0 / channels))
        s2 = float(np.sqrt(2.0 / hidden))
        from .tensor import randn, zeros
        self.w1 = randn(rng, (channels, hidden), scale=s1, requires_grad=True)
        self.b1 = zeros(hidden, requires_grad=True)
        self.w2 = randn(rng, (hidden, num_categories), scale=s2, requires_grad=True)
        self.b2 = zeros(num_categories, requires_grad=True)

    def parameters(self):
        return {"predictor.w1": self.w1, "predictor.b1": self.b1,
                "predictor.w2": self.w2, "predictor.b2": self.b2}


def predict_logits(pred: MixturePredictor, q: Tensor) -> Tensor:
    """Logits a = layer2(relu(layer1(q))) for a query descriptor q of width C."""
    if q.ndim != 1:
        raise ValueError(f"query descriptor must be 1-D, got {q.shape}")
    if q.shape[0] != pred.w1.shape[0]:
        raise ValueError(f"descriptor width {q.shape[0]} != predictor width {pred.w1.shape[0]}")
    h = (matmul(q.reshape(1, -1), pred.w1) + pred.b1).relu()
    a = matmul(h, pred.w2) + pred.b2
    return a.reshape(-1)


def synthesize_guidance(mem: PrototypeMemory, a: Tensor, mode: str = "mixture",
                        y: int | None = None) -> Tensor:
    """Build the guidance vector from the memory.

    mixture: v = sum_k softmax(a)_k * m_k  (gradient flows through the logits
    only; prototypes are constants). nearest: the prototype with the largest
    logit among initialized slots, ties to the lowest index. oracle: slot
    ``y``; if that slot was never written (unseen category) we fall back to
    the mixture so evaluation remains defined.
    """
    if not mem.any_initialized():
        raise MemoryError_("guidance requested from an empty prototype memory")
    if a.shape != (mem.num_categories,):
        raise ValueError(f"logit shape {a.shape} != (K={mem.num_categories},)")
    protos = Tensor(mem.prototypes)
    if mode == "mixture":
        pi = softmax(a.reshape(1, -1), axis=1)
        return matmul(pi, protos).reshape(-1)
    if mode == "nearest":
        logits = a.data.copy()
        logits[~mem.initialized] = -np.inf
        k = int(np.argmax(logits))
        return Tensor(mem.prototypes[k].copy())
    if mode == "oracle":
        if y is None:
            raise ValueError("oracle guidance requires a category id")
        if not 0 <= y < mem.num_categories:
            raise MemoryError_(f"category id {y} out of range")
        if not mem.initialized[y]:
            return synthesize_guidance(mem, a, mode="mixture")
        return Tensor(mem.prototypes[y].copy())
    raise ValueError(f"unknown guidance mode {mode!r}")


def classification_loss(a: Tensor, y: int) -> Tensor:
    """Cross-entropy -log softmax(a)_y, computed via stable log-sum-exp."""
    k = a.shape[0]
    if not 0 <= y < k:
        raise ValueError(f"category id {y} out of range [0, {k})")
    m = float(a.data.max())
    lse = (a - m).exp().sum().log() + m
    onehot = np.zeros(k, dtype=a.data.dtype)
    onehot[y] = 1.0
    return lse - (a * Tensor(onehot)).sum()


def combine_bootstrap(v: Tensor | None, r: Tensor | None, training: bool) -> Tensor:
    """Training may add the live reference vector to the synthesized guidance.

    Supplying a reference outside training violates the reference-free
    contract and is a hard error.
    """
    if not training and r is not None:
        raise ValueError("reference vector supplied at inference; inference is reference-free")
    if v is None:
        if r is None:
            raise ValueError("neither guidance nor reference available")
        return r
    if training and r is not None:
        return v + r
    return v
