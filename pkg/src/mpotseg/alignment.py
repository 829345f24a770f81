"""Pixel-text score maps, transport refinement, layer fusion and prediction.

Shapes used throughout (``M = H_L * W_L`` low-res pixels, ``K`` classes,
``N`` prompts, ``L`` encoder layers)::

    pixel embeddings   (L, M, D)
    text embeddings    (K*N, D)     class-major, prompt-minor rows
    score matrices     (L, M, K*N)
    predictions        (H*W, K)

All operations accept numpy arrays or :class:`~mpotseg.autodiff.Tensor`
and return tensors, so the same code serves inference and training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, concat, no_grad
from .ot import OTError, SinkhornConfig, TransportPlan, hungarian_assignment, sinkhorn_log, uniform_marginals

MATCHERS = ("sinkhorn", "hungarian", "none")


class AlignmentError(ValueError):
    pass


def normalize_rows(x):
    x = as_tensor(x)
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(norms == 0):
        raise AlignmentError("cannot normalize a zero row")
    return x / (x * x).sum(axis=-1, keepdims=True).sqrt()


@dataclass
class GtaParams:
    """Affine map from the concatenated ``2D`` input back to ``D``."""

    weight: Tensor  # (2D, D)
    bias: Tensor  # (D,)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scale: float = 0.01) -> GtaParams:
        # start close to "pass g through unchanged"
        w = np.vstack([np.zeros((dim, dim)), np.eye(dim)]) + rng.normal(0, scale, (2 * dim, dim))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(dim), requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        return {"gta.weight": self.weight, "gta.bias": self.bias}


def global_text_align(g, f_global, q: GtaParams) -> Tensor:
    g = as_tensor(g)
    f_global = np.asarray(f_global, dtype=np.float64).reshape(-1)
    if f_global.shape[0] != g.shape[-1] or q.weight.shape[0] != 2 * g.shape[-1]:
        raise AlignmentError("dimension mismatch between text, global embedding and GTA weights")
    return concat([g * f_global, g], axis=-1) @ q.weight + q.bias


def score_matrix(f, g_ga) -> Tensor:
    """Cosine scores between row-normalized pixel and text embeddings."""
    f, g_ga = as_tensor(f), as_tensor(g_ga)
    if f.shape[-1] != g_ga.shape[-1]:
        raise AlignmentError(f"embedding dims differ: {f.shape[-1]} vs {g_ga.shape[-1]}")
    return f @ g_ga.T


def _class_blocks(s: Tensor, n_prompts: int) -> Tensor:
    # (..., M, K*N) -> (..., K, M, N)
    *lead, m, kn = s.shape
    if kn % n_prompts:
        raise AlignmentError(f"{kn} score columns are not divisible by {n_prompts} prompts")
    k = kn // n_prompts
    nd = len(lead)
    blocks = s.reshape(tuple(lead) + (m, k, n_prompts))
    return blocks.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_blocks(p: Tensor) -> Tensor:
    # (..., K, M, N) -> (..., M, K*N)
    *lead, k, m, n = p.shape
    nd = len(lead)
    return p.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2)).reshape(tuple(lead) + (m, k * n))


def layer_plans(s, n_prompts: int, cfg: SinkhornConfig, matcher: str = "sinkhorn",
                detach: bool = False, joint: bool = False) -> Tensor:
    """Transport plans for score matrices of shape ``(..., M, K*N)``.

    Returns raw plans with the same shape as ``s``; per class block they have
    uniform marginals ``1/M`` and ``1/N``. ``joint=True`` instead solves one
    ``M x K*N`` problem per layer. ``matcher="none"`` returns the uniform plan.
    """
    s = as_tensor(s)
    m, kn = s.shape[-2:]
    if matcher not in MATCHERS:
        raise AlignmentError(f"unknown matcher {matcher!r}")
    if joint:
        n_prompts = kn
    k = kn // n_prompts
    if matcher == "none":
        return Tensor(np.full(s.shape, 1.0 / (m * n_prompts)))
    blocks = _class_blocks(s, n_prompts)
    cost = 1.0 - blocks
    if matcher == "hungarian":
        c = cost.data.reshape(-1, m, n_prompts)
        plans = np.stack([hungarian_assignment(ci).values for ci in c]).reshape(cost.shape)
        return _merge_blocks(Tensor(plans))
    mu, nu = uniform_marginals(m, n_prompts)
    if detach:
        with no_grad():
            plan, _, _ = sinkhorn_log(cost.detach(), mu, nu, cfg)
        plan = Tensor(plan.data)
    else:
        plan, _, _ = sinkhorn_log(cost, mu, nu, cfg)
    return _merge_blocks(plan)


def solve_layer_plans(s, n_prompts: int, cfg: SinkhornConfig | None = None) -> list[TransportPlan]:
    """Per-class Sinkhorn plans for one ``M x K*N`` score matrix."""
    cfg = cfg or SinkhornConfig()
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    if s.ndim != 2:
        raise AlignmentError("expected a single score matrix")
    m = s.shape[0]
    mu, nu = uniform_marginals(m, n_prompts)
    with no_grad():
        blocks = _class_blocks(Tensor(s), n_prompts)
        plan, iters, conv = sinkhorn_log(1.0 - blocks, mu, nu, cfg)
    return [TransportPlan(plan.data[i], int(iters[i]), bool(conv[i])) for i in range(plan.shape[0])]


def refine_scores(s, plans) -> Tensor:
    """Entrywise product of scores with plans (list of class blocks or one matrix)."""
    s = as_tensor(s)
    if isinstance(plans, (list, tuple)):
        plans = concat([as_tensor(p.values if isinstance(p, TransportPlan) else p) for p in plans], axis=-1)
    plans = as_tensor(plans)
    if plans.shape != s.shape:
        raise AlignmentError(f"plan shape {plans.shape} does not match scores {s.shape}")
    return plans * s


def fuse_layers(refined, score_bound: float = 1.0) -> Tensor:
    """Geometric mean over layers ``n..L`` of transformed refined scores.

    Intermediate layers pass through a sigmoid; the final layer is mapped
    affinely from ``[-score_bound, score_bound]`` onto ``[0, 1]`` so that the
    fractional power stays real.
    """
    if isinstance(refined, (list, tuple)):
        if not refined:
            raise AlignmentError("need at least one layer to fuse")
        refined = concat([as_tensor(r).unsqueeze(0) for r in refined], axis=0)
    refined = as_tensor(refined)
    if refined.ndim == 2:
        refined = refined.unsqueeze(0)
    d = refined.shape[0]
    last = ((refined[-1] + score_bound) * (0.5 / score_bound)).clip(1e-12, np.inf) ** (1.0 / d)
    if d == 1:
        return last
    inner = refined[:-1].sigmoid() ** (1.0 / d)
    out = last
    for i in range(d - 1):
        out = out * inner[i]
    return out


def collapse_prompts(scores, n_prompts: int) -> Tensor:
    scores = as_tensor(scores)
    *lead, kn = scores.shape
    if kn % n_prompts:
        raise AlignmentError(f"{kn} columns are not divisible by {n_prompts} prompts")
    return scores.reshape(tuple(lead) + (kn // n_prompts, n_prompts)).sum(axis=-1)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # corner-aligned linear interpolation weights, (n_out, n_in)
    w = np.zeros((n_out, n_in))
    if n_in == 1:
        w[:, 0] = 1.0
        return w
    pos = np.linspace(0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    w[np.arange(n_out), lo] = 1.0 - frac
    w[np.arange(n_out), lo + 1] += frac
    return w


def upsample_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Bilinear (corner-aligned) upsampling as an ``(H*W, H_L*W_L)`` matrix."""
    (hl, wl), (h, w) = src, dst
    if h < hl or w < wl:
        raise AlignmentError(f"target {dst} is smaller than source {src}")
    return np.kron(_interp_matrix(h, hl), _interp_matrix(w, wl))


def upsample(scores, src: tuple[int, int], dst: tuple[int, int]) -> Tensor:
    return as_tensor(upsample_matrix(src, dst)) @ as_tensor(scores)


@dataclass
class DecoderParams:
    """Per-pixel two-layer decoder over the stacked collapsed score maps."""

    w1: Tensor  # (L*K, hidden)
    b1: Tensor
    w2: Tensor  # (hidden, K)
    b2: Tensor

    @classmethod
    def init(cls, n_in: int, n_classes: int, rng: np.random.Generator, hidden: int = 32) -> DecoderParams:
        return cls(
            Tensor(rng.normal(0, 1.0 / np.sqrt(n_in), (n_in, hidden)), requires_grad=True),
            Tensor(np.zeros(hidden), requires_grad=True),
            Tensor(rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, n_classes)), requires_grad=True),
            Tensor(np.zeros(n_classes), requires_grad=True),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"decoder.w1": self.w1, "decoder.b1": self.b1, "decoder.w2": self.w2, "decoder.b2": self.b2}


def decode(layer_scores, params: DecoderParams, n_prompts: int, up: np.ndarray) -> Tensor:
    """Decoder logits ``(H*W, K)`` from all ``L`` raw score matrices."""
    layer_scores = as_tensor(layer_scores)
    L = layer_scores.shape[0]
    expected = params.w1.shape[0]
    collapsed = collapse_prompts(layer_scores, n_prompts)  # (L, M, K)
    k = collapsed.shape[-1]
    if L * k != expected:
        raise AlignmentError(f"decoder expects {expected // k} layers, got {L}")
    feats = collapsed.transpose(1, 0, 2).reshape(collapsed.shape[1], L * k)
    hidden = (feats @ params.w1 + params.b1).tanh()
    return as_tensor(up) @ (hidden @ params.w2 + params.b2)


def blend(y, y_tilde, blend_lambda: float) -> Tensor:
    if not 0.0 <= blend_lambda <= 1.0:
        raise AlignmentError(f"blend_lambda must lie in [0, 1], got {blend_lambda}")
    y, y_tilde = as_tensor(y), as_tensor(y_tilde)
    if y.shape != y_tilde.shape:
        raise AlignmentError("prediction shapes differ")
    return y * blend_lambda + y_tilde * (1.0 - blend_lambda)


@dataclass
class PipelineConfig:
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    blend_lambda: float = 0.2
    matcher: str = "sinkhorn"
    start_layer: int = 4  # 1-based first layer fed to the transport fusion
    plan_gradient: str = "through"  # or "detached"
    joint_plans: bool = False

    def __post_init__(self):
        if self.matcher not in MATCHERS:
            raise AlignmentError(f"matcher must be one of {MATCHERS}")
        if self.plan_gradient not in ("through", "detached"):
            raise AlignmentError("plan_gradient must be 'through' or 'detached'")
        if self.start_layer < 1:
            raise AlignmentError("start_layer is 1-based")


@dataclass
class Prediction:
    y: Tensor  # decoder output
    y_tilde: Tensor  # upsampled transport-refined scores
    y_star: Tensor  # blend
    blend_lambda: float
    scores: Tensor  # raw (L, M, K*N)
    fused: Tensor  # (M, K*N)
    text: Tensor  # g_GA, normalized (K*N, D)


@dataclass
class Model:
    """Learnable parameter groups: prompt contexts, GTA layer and decoder."""

    contexts: Tensor  # (N, l, ctx_dim)
    gta: GtaParams
    decoder: DecoderParams

    def parameters(self) -> dict[str, Tensor]:
        out = {"prompts.contexts": self.contexts}
        out.update(self.gta.parameters())
        out.update(self.decoder.parameters())
        return out

    def copy(self) -> Model:
        p = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.parameters().items()}
        return Model(
            p["prompts.contexts"],
            GtaParams(p["gta.weight"], p["gta.bias"]),
            DecoderParams(p["decoder.w1"], p["decoder.b1"], p["decoder.w2"], p["decoder.b2"]),
        )

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> Model:
        t = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}
        return cls(
            t["prompts.contexts"],
            GtaParams(t["gta.weight"], t["gta.bias"]),
            DecoderParams(t["decoder.w1"], t["decoder.b1"], t["decoder.w2"], t["decoder.b2"]),
        )


def init_model(world_cfg, rng: np.random.Generator, context_std: float = 0.02) -> Model:
    c = world_cfg
    contexts = Tensor(rng.normal(0, context_std, (c.n_prompts, c.ctx_len, c.ctx_dim)), requires_grad=True)
    gta = GtaParams.init(c.dim, rng)
    decoder = DecoderParams.init(c.n_layers * c.n_classes, c.n_classes, rng)
    return Model(contexts, gta, decoder)


def text_embeddings(model: Model, encoder, f_global) -> Tensor:
    g = normalize_rows(encoder.encode(model.contexts))
    return normalize_rows(global_text_align(g, f_global, model.gta))


def forward(scene, model: Model, encoder, cfg: PipelineConfig, out_hw: tuple[int, int] | None = None) -> Prediction:
    """Full prediction for one scene: scores, plans, fusion, decoder and blend."""
    n_prompts = model.contexts.shape[0]
    L = scene.layers.shape[0]
    if not 1 <= cfg.start_layer <= L:
        raise AlignmentError(f"start_layer {cfg.start_layer} outside 1..{L}")
    out_hw = out_hw or scene.labels.shape
    up = upsample_matrix(scene.grid, out_hw)

    g_ga = text_embeddings(model, encoder, scene.global_embedding)
    scores = score_matrix(scene.layers, g_ga)  # (L, M, KN)
    m = scores.shape[1]

    sel = scores[cfg.start_layer - 1 :]
    plans = layer_plans(sel, n_prompts, cfg.sinkhorn, cfg.matcher,
                        detach=cfg.plan_gradient == "detached", joint=cfg.joint_plans)
    width = scores.shape[-1] if cfg.joint_plans else n_prompts
    # rescale so the uniform plan is all ones
    refined = refine_scores(sel, plans * float(m * width))
    fused = fuse_layers(refined)
    y_tilde = as_tensor(up) @ collapse_prompts(fused, n_prompts)
    y = decode(scores, model.decoder, n_prompts, up)
    return Prediction(y, y_tilde, blend(y, y_tilde, cfg.blend_lambda), cfg.blend_lambda, scores, fused, g_ga)
