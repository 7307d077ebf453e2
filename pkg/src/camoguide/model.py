"""Model assembly: pyramid encoder, reference encoder, guidance, decoder.

The query encoder produces four stages at strides 4/8/16/32, each projected
to a common width C. The reference encoder shares the architecture with its
own weights; a reference vector is the stage-4 features masked by the
(average-pooled) foreground mask and globally pooled. At inference no
reference path runs at all: guidance comes from the prototype memory alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import baa as baa_mod
from .memory import (MixturePredictor, PrototypeMemory, combine_bootstrap,
                     predict_logits, synthesize_guidance)
from .tensor import (Tensor, concat, conv2d, global_average_pool, matmul,
                     randn, upsample_bilinear_2x, zeros)

SEED_NORM_EPS = 1e-6


@dataclass
class ModelConfig:
    channels: int = 64
    categories: int = 8
    input_size: int = 64
    baa_iters_top: int = 3
    share_baa: bool = False
    one_way_baa: bool = False
    guidance_mode: str = "mixture"
    no_ref_baseline: bool = False
    freeze_ref: bool = False
    bootstrap_ref: bool = True
    momentum: float = 0.99

    def __post_init__(self):
        if self.input_size % 32 != 0:
            raise ValueError(f"input_size {self.input_size} must be divisible by 32")
        if self.guidance_mode not in ("mixture", "nearest", "oracle"):
            raise ValueError(f"unknown guidance mode {self.guidance_mode!r}")


class _Conv:
    def __init__(self, cin: int, cout: int, rng, requires_grad=True):
        scale = math.sqrt(2.0 / (cin * 9))
        self.w = randn(rng, (cout, cin, 3, 3), scale=scale, requires_grad=requires_grad)
        self.b = zeros(cout, requires_grad=requires_grad)

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return conv2d(x, self.w, self.b, stride=stride)


class _Proj:
    """1x1 channel projection implemented as a matmul over flattened positions."""

    def __init__(self, cin: int, cout: int, rng, requires_grad=True):
        scale = math.sqrt(1.0 / cin)
        self.w = randn(rng, (cin, cout), scale=scale, requires_grad=requires_grad)
        self.b = zeros(cout, requires_grad=requires_grad)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        rows = x.reshape(c, h * w).transpose()
        out = matmul(rows, self.w) + self.b
        return out.transpose().reshape(self.w.shape[1], h, w)


class _Encoder:
    """Five stride-2 convs giving strides 4/8/16/32, plus per-stage projections.

    The reference variant (``top_only``) projects only the coarsest stage,
    which is the only one the reference vector consumes.
    """

    def __init__(self, channels: int, rng, requires_grad=True, top_only=False):
        c = channels
        self.top_only = top_only
        self.conv1a = _Conv(3, c, rng, requires_grad)
        self.conv1b = _Conv(c, c, rng, requires_grad)
        self.conv2 = _Conv(c, c, rng, requires_grad)
        self.conv3 = _Conv(c, c, rng, requires_grad)
        self.conv4 = _Conv(c, c, rng, requires_grad)
        self.proj = [_Proj(c, c, rng, requires_grad) for _ in range(1 if top_only else 4)]

    def _trunk(self, image: Tensor) -> list[Tensor]:
        t = self.conv1a(image, stride=2).relu()
        t1 = self.conv1b(t, stride=2).relu()
        t2 = self.conv2(t1, stride=2).relu()
        t3 = self.conv3(t2, stride=2).relu()
        t4 = self.conv4(t3, stride=2).relu()
        return [t1, t2, t3, t4]

    def forward(self, image: Tensor) -> list[Tensor]:
        trunk = self._trunk(image)
        if self.top_only:
            raise RuntimeError("top-only encoder has no full pyramid")
        return [p(t) for p, t in zip(self.proj, trunk)]

    def forward_top(self, image: Tensor) -> Tensor:
        return self.proj[-1](self._trunk(image)[3])

    def parameters(self, prefix: str) -> dict:
        out = {}
        for name in ("conv1a", "conv1b", "conv2", "conv3", "conv4"):
            layer = getattr(self, name)
            out[f"{prefix}.{name}.w"] = layer.w
            out[f"{prefix}.{name}.b"] = layer.b
        for i, p in enumerate(self.proj):
            stage = 4 if self.top_only else i + 1
            out[f"{prefix}.proj{stage}.w"] = p.w
            out[f"{prefix}.proj{stage}.b"] = p.b
        return out


class _Decoder:
    """Top-down mask decoder: conv, upsample, add 1x1-projected laterals."""

    def __init__(self, channels: int, rng):
        c = channels
        self.head = _Conv(c + 1, c, rng)
        self.fuse = [_Conv(c, c, rng) for _ in range(3)]
        self.lateral = [_Proj(c, c, rng) for _ in range(3)]
        self.out = _Conv(c, 1, rng)

    def forward(self, stages: Sequence[Tensor], seed: Tensor) -> Tensor:
        x1, x2, x3, x4 = stages
        d = self.head(concat([x4, seed], axis=0)).relu()
        for fuse, lat, skip in zip(self.fuse, self.lateral, (x3, x2, x1)):
            d = fuse(upsample_bilinear_2x(d) + lat(skip)).relu()
        logits = self.out(d)
        return upsample_bilinear_2x(upsample_bilinear_2x(logits))

    def parameters(self, prefix: str) -> dict:
        out = {f"{prefix}.head.w": self.head.w, f"{prefix}.head.b": self.head.b,
               f"{prefix}.out.w": self.out.w, f"{prefix}.out.b": self.out.b}
        for i, (f, l) in enumerate(zip(self.fuse, self.lateral)):
            out[f"{prefix}.fuse{i}.w"] = f.w
            out[f"{prefix}.fuse{i}.b"] = f.b
            out[f"{prefix}.lat{i}.w"] = l.w
            out[f"{prefix}.lat{i}.b"] = l.b
        return out


class CamoModel:
    """Full model; with ``no_ref_baseline`` only encoder + decoder remain."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.encoder = _Encoder(cfg.channels, rng)
        self.decoder = _Decoder(cfg.channels, rng)
        self.ref_encoder = None
        self.predictor = None
        self.memory = None
        self.baa_params: list[baa_mod.BaaParams] = []
        self.ref_encoder_calls = 0
        # test hook: run the training path with guidance fully disabled
        # (stages untouched, zero seed), matching the baseline computation
        self.bypass_guidance = False
        if not cfg.no_ref_baseline:
            self.ref_encoder = _Encoder(cfg.channels, rng,
                                        requires_grad=not cfg.freeze_ref,
                                        top_only=True)
            self.predictor = MixturePredictor(cfg.channels, cfg.categories, rng)
            self.memory = PrototypeMemory(cfg.categories, cfg.channels,
                                          momentum=cfg.momentum)
            n_apps = cfg.baa_iters_top + 3
            if cfg.share_baa:
                top = baa_mod.BaaParams(cfg.channels, rng)
                rest = [baa_mod.BaaParams(cfg.channels, rng) for _ in range(3)]
                self.baa_params = [top] * cfg.baa_iters_top + rest
            else:
                self.baa_params = [baa_mod.BaaParams(cfg.channels, rng)
                                   for _ in range(n_apps)]

    # -- parameter registry -----------------------------------------------------

    def parameters(self) -> dict:
        out = self.encoder.parameters("enc")
        out.update(self.decoder.parameters("dec"))
        if self.ref_encoder is not None and not self.cfg.freeze_ref:
            out.update(self.ref_encoder.parameters("ref"))
        if self.predictor is not None:
            out.update(self.predictor.parameters())
        seen = set()
        for i, p in enumerate(self.baa_params):
            if id(p) in seen:
                continue
            seen.add(id(p))
            out.update(p.parameters(f"baa{i}"))
        return out

    def all_tensors(self) -> dict:
        """Every weight tensor including frozen ones (for checkpoints)."""
        out = self.parameters()
        if self.ref_encoder is not None and self.cfg.freeze_ref:
            out.update(self.ref_encoder.parameters("ref"))
        return out

    # -- components ---------------------------------------------------------------

    def encode_query(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"query image must be 3xSxS, got {image.shape}")
        s = image.shape[1]
        if s % 32 != 0 or image.shape[2] != s:
            raise ValueError(f"image side {image.shape[1:]} must be square and divisible by 32")
        return self.encoder.forward(image)

    def encode_reference(self, image: Tensor, fg_mask: Tensor) -> Tensor:
        """Masked, pooled stage-4 features of a reference image."""
        if self.ref_encoder is None:
            raise RuntimeError("baseline model has no reference encoder")
        if fg_mask.shape != (1,) + image.shape[1:]:
            raise ValueError(f"mask shape {fg_mask.shape} does not match image {image.shape}")
        self.ref_encoder_calls += 1
        x4 = self.ref_encoder.forward_top(image)
        factor = image.shape[1] // x4.shape[1]
        m = fg_mask.data.reshape(1, x4.shape[1], factor, x4.shape[2], factor).mean(axis=(2, 4))
        return global_average_pool(x4 * Tensor(m))

    def query_descriptor(self, stages: Sequence[Tensor]) -> Tensor:
        return global_average_pool(stages[3])

    def relevance_seed(self, x4: Tensor, v: Tensor) -> Tensor:
        """Cosine map between each top-stage position and the guidance vector."""
        c = x4.shape[0]
        vcol = v.reshape(c, 1, 1)
        dot = (x4 * vcol).sum(axis=0, keepdims=True)
        nx = ((x4 * x4).sum(axis=0, keepdims=True) + 1e-12).sqrt()
        nv = ((v * v).sum() + 1e-12).sqrt()
        return dot / (nx * nv.reshape(1, 1, 1) + SEED_NORM_EPS)

    def decode_mask(self, stages: Sequence[Tensor], seed: Tensor) -> Tensor:
        return self.decoder.forward(stages, seed)

    def _zero_seed(self, x4: Tensor) -> Tensor:
        return Tensor(np.zeros((1,) + x4.shape[1:], dtype=np.float32))

    # -- forward paths ---------------------------------------------------------------

    def forward_train(self, image: Tensor, r: Tensor | None, y: int | None):
        """Training pass; returns (mask logits, class logits, synthesized v).

        With an empty memory the guidance falls back to the live reference
        vector alone. The caller owns the EMA update (with a detached r).
        """
        stages = self.encode_query(image)
        if self.cfg.no_ref_baseline:
            logits = self.decode_mask(stages, self._zero_seed(stages[3]))
            return logits, None, None
        q = self.query_descriptor(stages)
        a = predict_logits(self.predictor, q)
        if self.bypass_guidance:
            logits = self.decode_mask(stages, self._zero_seed(stages[3]))
            return logits, a, None
        v = None
        if self.memory.any_initialized():
            v = synthesize_guidance(self.memory, a, mode="mixture")
        guidance = combine_bootstrap(v, r if (self.cfg.bootstrap_ref or v is None) else None,
                                     training=True)
        stages, v_final = baa_mod.multi_scale_guidance(
            stages, guidance, self.baa_params, iters_top=self.cfg.baa_iters_top,
            one_way=self.cfg.one_way_baa)
        seed = self.relevance_seed(stages[3], v_final)
        logits = self.decode_mask(stages, seed)
        return logits, a, v

    def forward_infer(self, image: Tensor, y: int | None = None):
        """Reference-free inference; returns (probability map, mixture weights)."""
        stages = self.encode_query(image)
        if self.cfg.no_ref_baseline:
            logits = self.decode_mask(stages, self._zero_seed(stages[3]))
            return logits.sigmoid(), None
        q = self.query_descriptor(stages)
        a = predict_logits(self.predictor, q)
        mode = self.cfg.guidance_mode
        if mode == "oracle" and y is None:
            raise ValueError("oracle guidance requires a category label; "
                             "single-image inference refuses it")
        v = synthesize_guidance(self.memory, a, mode=mode, y=y)
        guidance = combine_bootstrap(v, None, training=False)
        stages, v_final = baa_mod.multi_scale_guidance(
            stages, guidance, self.baa_params, iters_top=self.cfg.baa_iters_top,
            one_way=self.cfg.one_way_baa)
        seed = self.relevance_seed(stages[3], v_final)
        logits = self.decode_mask(stages, seed)
        pi = _softmax_np(a.data)
        return logits.sigmoid(), pi


def _softmax_np(a: np.ndarray) -> np.ndarray:
    z = a - a.max()
    e = np.exp(z)
    return e / e.sum()
