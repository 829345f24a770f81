"""Deterministic toy world standing in for a frozen vision-language encoder.

The world ties the two frozen encoders together the way contrastive
pre-training would: a class ``k`` seen through attribute ``a`` appears in the
image as the text encoder's output for class ``k`` prompted with the ideal
context for attribute ``a``. Learnable prompts can therefore recover those
contexts on seen classes and transfer them to unseen class names.

Each class owns ``A`` attribute modes. Within an object the dominant mode
varies smoothly in space, so a single averaged prompt fits a class worse
than a set of prompts that specialise on different modes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 8
    n_prompts: int = 4
    dim: int = 32
    ctx_dim: int = 16
    ctx_len: int = 8
    n_layers: int = 6
    height: int = 32
    width: int = 32
    n_attributes: int = 3
    noise: float = 0.1
    seed: int = 0
    n_seen: int = 6
    downsample: int = 4
    # frozen-encoder geometry
    encoder_gain: float = 1.6
    class_token_scale: float = 8.0
    attribute_scale: float = 1.0
    attribute_sharpness: float = 6.0
    first_layer_alignment: float = 0.3
    center_embeddings: bool = True

    def __post_init__(self):
        ints = ("n_classes", "n_prompts", "dim", "ctx_dim", "ctx_len", "n_layers",
                "height", "width", "n_attributes", "downsample")
        for name in ints:
            if getattr(self, name) < 1:
                raise WorldError(f"{name} must be positive")
        if self.noise < 0:
            raise WorldError("noise must be nonnegative")
        if not 1 <= self.n_seen < self.n_classes:
            raise WorldError("split must leave at least one seen and one unseen class")
        if self.height % self.downsample or self.width % self.downsample:
            raise WorldError("image size must be divisible by the downsampling factor")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.downsample, self.width // self.downsample


@dataclass(frozen=True)
class ClassPartition:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        s, u = set(self.seen), set(self.unseen)
        if not s or not u:
            raise WorldError("both seen and unseen sets must be nonempty")
        if s & u:
            raise WorldError("seen and unseen classes overlap")
        if s | u != set(range(len(self.names))):
            raise WorldError("partition does not cover all classes")


@dataclass
class SceneBatch:
    labels: np.ndarray  # (H, W) int
    layers: np.ndarray  # (L, H_L*W_L, D)
    global_embedding: np.ndarray  # (D,)
    grid: tuple[int, int]
    seed: int

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]


def class_token(class_id: int, dim: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Word-embedding stand-in for a class name, derived from a hash of its id."""
    digest = hashlib.sha256(f"class:{seed}:{class_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim) * (scale / np.sqrt(dim))


def split_classes(cfg: WorldConfig, seed: int | None = None) -> ClassPartition:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 7])
    order = rng.permutation(cfg.n_classes)
    seen = tuple(sorted(int(c) for c in order[: cfg.n_seen]))
    unseen = tuple(sorted(int(c) for c in order[cfg.n_seen :]))
    names = tuple(f"class{k}" for k in range(cfg.n_classes))
    return ClassPartition(seen, unseen, names)


class TextEncoderStub:
    """Frozen text encoder: mean-pool the prompt sequence, random affine map, sine.

    ``encode`` is differentiable with respect to the prompt contexts; the
    internal weights are plain arrays and never trained.
    """

    def __init__(self, cfg: WorldConfig):
        rng = np.random.default_rng([cfg.seed, 1])
        self.cfg = cfg
        # random Fourier features: feature similarity decays with input distance
        self.proj = rng.standard_normal((cfg.dim, cfg.ctx_dim)) * cfg.encoder_gain
        self.bias = rng.uniform(0.0, 2.0 * np.pi, cfg.dim)
        self.offset = np.zeros(cfg.dim)
        self.tokens = np.stack(
            [class_token(k, cfg.ctx_dim, cfg.seed, cfg.class_token_scale) for k in range(cfg.n_classes)]
        )

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {"proj": self.proj, "bias": self.bias, "offset": self.offset, "tokens": self.tokens}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.frozen_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def encode_pooled(self, pooled):
        """Map pooled inputs ``(..., ctx_dim)`` to embeddings ``(..., dim)``."""
        pooled = as_tensor(pooled)
        return (pooled @ self.proj.T + self.bias).sin() - self.offset

    def encode(self, contexts, tokens: np.ndarray | None = None) -> Tensor:
        """Embed every (class, prompt) pair; rows are class-major, prompt-minor.

        ``contexts`` has shape ``(N, l, ctx_dim)``; the result is ``(K*N, dim)``.
        """
        contexts = as_tensor(contexts)
        tokens = self.tokens if tokens is None else np.asarray(tokens, dtype=np.float64)
        n, l, cd = contexts.shape
        if cd != tokens.shape[1]:
            raise WorldError(f"context dim {cd} does not match class token dim {tokens.shape[1]}")
        k = tokens.shape[0]
        pooled = (contexts.sum(axis=1).unsqueeze(0) + tokens[:, None, :]) * (1.0 / (l + 1))
        return self.encode_pooled(pooled.reshape(k * n, cd))


def text_encoder_stub(prompts, tokens, encoder: TextEncoderStub) -> Tensor:
    return encoder.encode(prompts, tokens)


class World:
    """Frozen encoders plus the scene generator for one configuration."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.text_encoder = TextEncoderStub(cfg)
        rng = np.random.default_rng([cfg.seed, 2])
        # ideal prompt contexts, one per attribute
        self.attribute_contexts = rng.standard_normal((cfg.n_attributes, cfg.ctx_dim)) * (
            cfg.attribute_scale / np.sqrt(cfg.ctx_dim)
        )
        l = cfg.ctx_len
        pooled = (l * self.attribute_contexts[None, :, :] + self.text_encoder.tokens[:, None, :]) / (l + 1)
        modes = self.text_encoder.encode_pooled(pooled).data
        if cfg.center_embeddings:
            # centre the shared space on the mean mode, as contrastive training tends to
            self.text_encoder.offset = modes.reshape(-1, cfg.dim).mean(axis=0)
            modes = modes - self.text_encoder.offset
        self.modes = modes / np.linalg.norm(modes, axis=-1, keepdims=True)  # (K, A, D)
        # class-specific, text-unrelated component that dominates early layers
        distort = rng.standard_normal((cfg.n_layers, cfg.n_classes, cfg.dim))
        self.distortion = distort / np.linalg.norm(distort, axis=-1, keepdims=True)
        if cfg.n_layers == 1:
            self.alignment = np.ones(1)
        else:
            self.alignment = np.linspace(cfg.first_layer_alignment, 1.0, cfg.n_layers)
        self.partition = split_classes(cfg)

    def checksum(self) -> str:
        h = hashlib.sha256(self.text_encoder.checksum().encode())
        for arr in (self.attribute_contexts, self.modes, self.distortion, self.alignment):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def generate_scene(self, seed: int) -> SceneBatch:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 3, seed])
        H, W = cfg.height, cfg.width
        hl, wl = cfg.grid
        n_obj = int(rng.integers(2, min(5, cfg.n_classes) + 1))
        classes = rng.choice(cfg.n_classes, size=n_obj, replace=False)
        n_sites = int(rng.integers(n_obj, 2 * n_obj + 1))
        site_cls = np.concatenate([classes, rng.choice(classes, size=n_sites - n_obj)])
        sites = rng.uniform(0, 1, size=(n_sites, 2)) * [H - 1, W - 1]
        yy, xx = np.mgrid[0:H, 0:W]
        d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
        labels = site_cls[np.argmin(d2, axis=-1)].astype(np.int64)

        # low-res samples sit at the corner-aligned positions of the upsampler
        ry = np.rint(np.linspace(0, H - 1, hl)).astype(int)
        rx = np.rint(np.linspace(0, W - 1, wl)).astype(int)
        low = labels[np.ix_(ry, rx)].reshape(-1)
        pos = np.stack(np.meshgrid(ry / (H - 1), rx / (W - 1), indexing="ij"), -1).reshape(-1, 2)

        A, D, L = cfg.n_attributes, cfg.dim, cfg.n_layers
        anchors = rng.uniform(0, 1, size=(cfg.n_classes, A, 2))
        drift = rng.normal(0, 0.05, size=(L, cfg.n_classes, A, 2))
        layers = np.empty((L, hl * wl, D))
        for i in range(L):
            anc = anchors[low] + drift[i][low]  # (M, A, 2)
            dist2 = ((pos[:, None, :] - anc) ** 2).sum(-1)
            logits = -cfg.attribute_sharpness * dist2 / 0.1
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            aligned = np.einsum("ma,mad->md", w, self.modes[low])
            aligned /= np.linalg.norm(aligned, axis=1, keepdims=True)
            s = self.alignment[i]
            emb = s * aligned + (1.0 - s) * self.distortion[i, low]
            emb = emb + rng.normal(0.0, cfg.noise, size=emb.shape)
            layers[i] = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        glob = layers[-1].mean(axis=0)
        glob /= np.linalg.norm(glob)
        return SceneBatch(labels, layers, glob, (hl, wl), int(seed))


def generate_scene(cfg: WorldConfig, seed: int) -> SceneBatch:
    return World(cfg).generate_scene(seed)


# ---------------------------------------------------------------------------
# flat binary archive for scenes
#
# little-endian; header: magic b"MPSCENE1", then int64 fields
#   seed, H, W, L, H_L, W_L, D
# body: labels (H*W int64), layers (L*H_L*W_L*D float64), global (D float64)

_SCENE_MAGIC = b"MPSCENE1"


def scene_to_bytes(scene: SceneBatch) -> bytes:
    H, W = scene.labels.shape
    L, M, D = scene.layers.shape
    hl, wl = scene.grid
    head = _SCENE_MAGIC + struct.pack("<7q", scene.seed, H, W, L, hl, wl, D)
    return (
        head
        + scene.labels.astype("<i8").tobytes()
        + scene.layers.astype("<f8").tobytes()
        + scene.global_embedding.astype("<f8").tobytes()
    )


def scene_from_bytes(buf: bytes) -> SceneBatch:
    if buf[:8] != _SCENE_MAGIC:
        raise WorldError("not a scene archive")
    seed, H, W, L, hl, wl, D = struct.unpack_from("<7q", buf, 8)
    off = 8 + 7 * 8
    labels = np.frombuffer(buf, "<i8", H * W, off).reshape(H, W).astype(np.int64)
    off += H * W * 8
    layers = np.frombuffer(buf, "<f8", L * hl * wl * D, off).reshape(L, hl * wl, D).copy()
    off += L * hl * wl * D * 8
    glob = np.frombuffer(buf, "<f8", D, off).copy()
    if off + D * 8 != len(buf):
        raise WorldError("trailing bytes in scene archive")
    return SceneBatch(labels, layers, glob, (hl, wl), seed)
