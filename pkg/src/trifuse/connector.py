"""Query-conditioned fusion of vision/audio/speech token streams.

Each present modality is cross-attended by the query tokens, the attended
streams are pooled and scored by a small weighting network, and the softmax
weights (masked to present modalities) drive a convex fusion followed by a
residual MLP that maps into the decoder width.

Modality order throughout is (vision, audio, speech); weights are reported
as (w_v, w_a, w_s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, ShapeError, Tensor
from .temporal import sinusoidal_pe_2d

MODALITIES = ("vision", "audio", "speech")

FUSION_ADAPTIVE = "adaptive"
FUSION_FIXED = "fixed"
FUSION_ADDITION = "addition"
FUSION_MODES = (FUSION_ADAPTIVE, FUSION_FIXED, FUSION_ADDITION)


class ModalityError(ValueError):
    """Raised for invalid modality bundles or weight assignments."""


@dataclass
class ModalityBundle:
    """Per-modality token features of shape (B, F, T, D); absent = None."""

    vision: Tensor | None = None
    audio: Tensor | None = None
    speech: Tensor | None = None

    def __post_init__(self):
        if not self.present:
            raise ModalityError("a modality bundle needs at least one present modality")
        shapes = {m: self.get(m).shape for m in self.present}
        ref = next(iter(shapes.values()))
        if any(len(s) != 4 for s in shapes.values()):
            raise ShapeError(f"modality tensors must be (B, F, T, D), got {shapes}")
        if any(s != ref for s in shapes.values()):
            raise ShapeError(f"present modalities disagree on shape: {shapes}")

    def get(self, name: str) -> Tensor | None:
        return getattr(self, name)

    @property
    def present(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if getattr(self, m) is not None)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.get(self.present[0]).shape

    def restricted(self, keep) -> "ModalityBundle":
        """New bundle with only the named modalities present."""
        keep = set(keep)
        return ModalityBundle(
            **{m: (self.get(m) if m in keep else None) for m in MODALITIES}
        )

    def zero_filled(self) -> "ModalityBundle":
        """Absent slots replaced by zero tensors (presence-agnostic baseline)."""
        b, f, t, d = self.shape
        filled = {}
        for m in MODALITIES:
            x = self.get(m)
            filled[m] = x if x is not None else Tensor(np.zeros((b, f, t, d)))
        return ModalityBundle(**filled)


@dataclass(frozen=True)
class ModalityWeights:
    """Normalized per-sample weights; absent modalities carry exactly 0."""

    w_v: float
    w_a: float
    w_s: float
    present: tuple[str, ...]

    def as_dict(self) -> dict[str, float]:
        return {"w_v": self.w_v, "w_a": self.w_a, "w_s": self.w_s}


@dataclass
class ConnectorParams:
    """All learned state of the connector plus the softmax temperature."""

    d: int
    d_llm: int
    tau: float
    attn: dict[str, dict[str, Tensor]]
    weight_w: Tensor
    weight_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    skip: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    query_proj: Tensor | None = None
    pe_cache: dict = field(default_factory=dict)

    def positional_encoding(self, frames: int, tokens: int) -> np.ndarray:
        key = (frames, tokens)
        if key not in self.pe_cache:
            self.pe_cache[key] = sinusoidal_pe_2d(frames, tokens, self.d)
        return self.pe_cache[key]


def init_connector(
    store: ParameterStore,
    d: int,
    d_llm: int,
    rng: np.random.Generator,
    tau: float = 1.0,
    d_query_in: int | None = None,
    prefix: str = "connector/",
) -> ConnectorParams:
    """Register connector parameters in ``store`` and return the handle.

    Attention projections start near identity so content similarity shapes
    the attention map from the first step.
    """

    def w(name, shape, scale):
        return store.add(prefix + name, rng.standard_normal(shape) * scale)

    def near_identity(name, n):
        return store.add(prefix + name, np.eye(n) + rng.standard_normal((n, n)) * 0.02)

    def ln(name, n):
        return store.add(prefix + name + "_g", np.ones(n)), store.add(
            prefix + name + "_b", np.zeros(n)
        )

    attn = {}
    for m in MODALITIES:
        g, b = ln(f"{m}/ln", d)
        attn[m] = {
            "wq": near_identity(f"{m}/wq", d),
            "wk": near_identity(f"{m}/wk", d),
            "wv": near_identity(f"{m}/wv", d),
            "wo": near_identity(f"{m}/wo", d),
            "ln_g": g,
            "ln_b": b,
        }
    ln1_g, ln1_b = ln("fuse_ln1", d)
    ln2_g, ln2_b = ln("fuse_ln2", d_llm)
    scale = 1.0 / math.sqrt(d)
    params = ConnectorParams(
        d=d,
        d_llm=d_llm,
        tau=tau,
        attn=attn,
        weight_w=w("weight_mlp/w", (3 * d, 3), scale),
        weight_b=store.add(prefix + "weight_mlp/b", np.zeros(3)),
        ln1_g=ln1_g,
        ln1_b=ln1_b,
        mlp_w1=w("mlp/w1", (d, d_llm), scale),
        mlp_b1=store.add(prefix + "mlp/b1", np.zeros(d_llm)),
        mlp_w2=w("mlp/w2", (d_llm, d_llm), 1.0 / math.sqrt(d_llm)),
        mlp_b2=store.add(prefix + "mlp/b2", np.zeros(d_llm)),
        skip=w("mlp/skip", (d, d_llm), scale),
        ln2_g=ln2_g,
        ln2_b=ln2_b,
        query_proj=(
            w("query_proj", (d_query_in, d), 1.0 / math.sqrt(d_query_in))
            if d_query_in
            else None
        ),
    )
    return params


def cross_attend(modality: Tensor, query: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Query tokens attend over a flattened modality sequence.

    modality: (B, S, D) with positional encoding already added; query: (B, L, D).
    Returns LayerNorm(attention output) of shape (B, L, D).
    """
    if modality.shape[-1] != query.shape[-1]:
        raise ShapeError(
            f"cross_attend: feature dims differ, {modality.shape} vs {query.shape}"
        )
    d = query.shape[-1]
    q = ag.matmul(query, p["wq"])
    k = ag.matmul(modality, p["wk"])
    v = ag.matmul(modality, p["wv"])
    logits = ag.matmul(q, ag.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
    attn = ag.softmax(logits, axis=-1)
    out = ag.matmul(ag.matmul(attn, v), p["wo"])
    return ag.layer_norm(out, p["ln_g"], p["ln_b"])


def pool_modality(f_q: Tensor) -> Tensor:
    """Global average pooling over the sequence axis: (B, L, D) -> (B, D)."""
    return ag.mean_pool(f_q, axis=1)


def masked_softmax(logits: Tensor, mask: np.ndarray, temperature: float) -> Tensor:
    """Softmax along the last axis restricted to mask==1 columns.

    Masked-out columns come out exactly 0 (they are excluded from the
    normalization rather than pushed through exp(-inf), keeping every stored
    value finite).
    """
    if temperature <= 0:
        raise ag.ParameterError(f"temperature must be positive, got {temperature}")
    mvec = np.broadcast_to(np.asarray(mask, dtype=np.float64), logits.shape)
    shift = np.where(mvec > 0, logits.data, -np.inf).max(axis=-1, keepdims=True)
    mask_t = Tensor(mvec.copy())
    # masked columns are zeroed before exp (not multiplied by exp(-inf)),
    # so no overflow regardless of the masked logit values
    z = (logits - shift) * mask_t * (1.0 / temperature)
    e = ag.exp(z) * mask_t
    total = ag.tsum(e, axis=-1, keepdims=True)
    return e / total


def compute_weights(
    pooled: dict[str, Tensor | None], params: ConnectorParams, present
) -> Tensor:
    """Score pooled streams and softmax over the present modalities.

    Absent entries are replaced by zero vectors in the concatenated input and
    their logits are masked out, so returned weights are exactly 0 there and
    the present weights sum to 1.
    """
    present = tuple(m for m in MODALITIES if m in present)
    if not present:
        raise ModalityError("compute_weights: empty present set")
    ref = pooled[present[0]]
    b, d = ref.shape
    blocks = []
    for m in MODALITIES:
        x = pooled.get(m)
        blocks.append(x if x is not None else Tensor(np.zeros((b, d))))
    feats = ag.concat(blocks, axis=1)  # (B, 3D)
    logits = ag.matmul(feats, params.weight_w) + params.weight_b  # (B, 3)
    mask = np.array([1.0 if m in present else 0.0 for m in MODALITIES])
    return masked_softmax(logits, mask, params.tau)


def constant_weights(mode: str, present, batch: int) -> Tensor:
    """Weights for the non-adaptive baselines: 1/|present| or unit sum."""
    present = tuple(m for m in MODALITIES if m in present)
    if mode == FUSION_FIXED:
        vals = [1.0 / len(present) if m in present else 0.0 for m in MODALITIES]
    elif mode == FUSION_ADDITION:
        vals = [1.0 for _ in MODALITIES]
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return Tensor(np.tile(vals, (batch, 1)))


def weighted_sum(weights: Tensor, streams: dict[str, Tensor | None]) -> Tensor:
    """Convex/weighted combination of the attended streams: sum_m w_m * f_m."""
    out = None
    for i, m in enumerate(MODALITIES):
        stream = streams.get(m)
        w_col = weights.data[:, i]
        if stream is None:
            if np.any(w_col != 0.0):
                raise ModalityError(
                    f"nonzero weight {w_col.max()} assigned to absent modality {m!r}"
                )
            continue
        w = ag.reshape(
            ag.gather_last(weights, np.full(weights.shape[0], i, dtype=np.int64)),
            (weights.shape[0], 1, 1),
        )
        term = stream * w
        out = term if out is None else out + term
    if out is None:
        raise ModalityError("weighted_sum: no present streams")
    return out


def fuse(weights: Tensor, streams: dict[str, Tensor | None], params: ConnectorParams):
    """Weighted fusion followed by LayerNorm, residual two-layer MLP, LayerNorm.

    Returns (pre_mlp, fused): the raw weighted sum (B, L, D) and the final
    representation (B, L, D_llm).
    """
    s_hat = weighted_sum(weights, streams)
    h = ag.layer_norm(s_hat, params.ln1_g, params.ln1_b)
    z = ag.matmul(ag.tanh(ag.matmul(h, params.mlp_w1) + params.mlp_b1), params.mlp_w2)
    z = z + params.mlp_b2 + ag.matmul(h, params.skip)
    return s_hat, ag.layer_norm(z, params.ln2_g, params.ln2_b)


@dataclass
class ConnectorOutput:
    tokens: Tensor  # (B, L, D_llm)
    weights: Tensor  # (B, 3), modality order (vision, audio, speech)
    pre_mlp: Tensor  # (B, L, D) weighted sum before the residual MLP
    attended: dict[str, Tensor]

    def sample_weights(self, i: int, present) -> ModalityWeights:
        w = self.weights.data[i]
        return ModalityWeights(float(w[0]), float(w[1]), float(w[2]), tuple(present))


def connector_forward(
    bundle: ModalityBundle,
    query: Tensor,
    params: ConnectorParams,
    mode: str = FUSION_ADAPTIVE,
) -> ConnectorOutput:
    """Full forward pass: PE add, per-modality cross-attention, weighting, fusion.

    ``mode`` selects the weighting rule: learned softmax weights ("adaptive"),
    1/|present| constants ("fixed"), or a presence-agnostic unit-weight sum
    ("addition", absent streams zero-filled before attention).
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if mode == FUSION_ADDITION:
        bundle = bundle.zero_filled()
    present = bundle.present
    b, f, t, d = bundle.shape
    if d != params.d:
        raise ShapeError(f"bundle feature dim {d} != connector dim {params.d}")
    pe = Tensor(params.positional_encoding(f, t))

    attended: dict[str, Tensor] = {}
    pooled: dict[str, Tensor] = {}
    for m in present:
        x = bundle.get(m) + pe  # broadcast over batch
        x = ag.reshape(x, (b, f * t, d))
        f_mq = cross_attend(x, query, params.attn[m])
        attended[m] = f_mq
        pooled[m] = pool_modality(f_mq)
    for m in MODALITIES:
        attended.setdefault(m, None)

    if mode == FUSION_ADAPTIVE:
        weights = compute_weights(pooled, params, present)
    else:
        weights = constant_weights(mode, present, b)

    pre_mlp, tokens = fuse(weights, attended, params)
    return ConnectorOutput(tokens=tokens, weights=weights, pre_mlp=pre_mlp, attended=attended)
