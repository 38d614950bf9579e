"""Frame/audio sampling geometry, character-level time tokens, time embeddings,
2-D sinusoidal positional encoding, and fixed-length slot compression.

Timestamps are spelled as six symbols — four integer digits, a decimal point,
one fractional digit — over the alphabet <0>..<9>, <.>.  The representable
range after clamping is [0, 9999.9] at 0.1 s resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParameterError, ShapeError, Tensor

TIME_ALPHABET = [f"<{d}>" for d in range(10)] + ["<.>"]
DOT_INDEX = 10
TIME_SEQ_LEN = 6
MAX_TIMESTAMP = 9999.9
SLOT_COUNT = 16


class TimeTokenError(ValueError):
    """Raised for malformed time-token sequences."""


@dataclass(frozen=True)
class FrameSamplePlan:
    """Uniform-bin frame timestamps plus a ±1 s audio window per frame."""

    n: int
    duration: float
    timestamps: tuple[float, ...]
    audio_windows: tuple[tuple[float, float], ...]


def sample_frames(duration: float, n: int = 64) -> FrameSamplePlan:
    """Pick ``n`` frames at uniform-bin midpoints t_i = (i+0.5)*duration/n.

    Each frame's audio window is [t_i-1, t_i+1] clamped to [0, duration].
    """
    if duration <= 0:
        raise ParameterError(f"duration must be positive, got {duration}")
    if n < 1:
        raise ParameterError(f"frame count must be >= 1, got {n}")
    ts = tuple((i + 0.5) * duration / n for i in range(n))
    windows = tuple((max(0.0, t - 1.0), min(duration, t + 1.0)) for t in ts)
    return FrameSamplePlan(n=n, duration=duration, timestamps=ts, audio_windows=windows)


def tokenize_timestamp(t: float) -> list[str]:
    """Spell a timestamp as 6 tokens: dddd.d, rounded half away from zero to
    0.1 s and clamped to 9999.9."""
    if t < 0:
        raise ParameterError(f"timestamp must be nonnegative, got {t}")
    tenths = math.floor(t * 10.0 + 0.5)  # half away from zero (t >= 0)
    tenths = min(tenths, 99999)
    whole, frac = divmod(tenths, 10)
    digits = f"{whole:04d}"
    return [f"<{d}>" for d in digits] + ["<.>", f"<{frac}>"]


def detokenize_timestamp(tokens: list[str]) -> float:
    """Exact inverse of ``tokenize_timestamp`` on the 0.1 s grid."""
    if len(tokens) != TIME_SEQ_LEN:
        raise TimeTokenError(f"time token sequence must have 6 symbols, got {len(tokens)}")
    for pos, tok in enumerate(tokens):
        if tok not in TIME_ALPHABET:
            raise TimeTokenError(f"unknown symbol {tok!r} at position {pos}")
        is_dot = tok == "<.>"
        if pos == 4 and not is_dot:
            raise TimeTokenError(f"expected <.> at position 4, got {tok!r}")
        if pos != 4 and is_dot:
            raise TimeTokenError(f"unexpected <.> at position {pos}")
    digits = [TIME_ALPHABET.index(t) for t in tokens]
    whole = digits[0] * 1000 + digits[1] * 100 + digits[2] * 10 + digits[3]
    return whole + digits[5] / 10.0


def time_token_ids(t: float) -> list[int]:
    """Timestamp as indices into the 11-symbol alphabet."""
    return [TIME_ALPHABET.index(tok) for tok in tokenize_timestamp(t)]


def embed_time(tokens: list[str], table: Tensor) -> Tensor:
    """Look up a 6xD time feature from an 11-row embedding table."""
    if table.shape[0] != len(TIME_ALPHABET):
        raise ShapeError(
            f"time embedding table must have {len(TIME_ALPHABET)} rows, got {table.shape[0]}"
        )
    try:
        ids = [TIME_ALPHABET.index(tok) for tok in tokens]
    except ValueError:
        bad = next(t for t in tokens if t not in TIME_ALPHABET)
        raise TimeTokenError(f"symbol {bad!r} outside the time alphabet")
    return ag.embedding(table, np.asarray(ids, dtype=np.int64))


def sinusoidal_pe_2d(frames: int, tokens: int, dim: int) -> np.ndarray:
    """Deterministic 2-D positional encoding of shape (frames, tokens, dim).

    The first dim/2 channels encode the frame index, the second half the
    within-frame token index; each half uses the standard interleaved
    sin/cos geometric-frequency scheme.  Values lie in [-1, 1].
    """
    if dim % 4 != 0:
        raise ParameterError(f"pe dimension must be divisible by 4, got {dim}")
    half = dim // 2

    def axis_pe(n, d):
        pos = np.arange(n, dtype=np.float64)[:, None]
        idx = np.arange(d // 2, dtype=np.float64)[None, :]
        freq = np.power(10000.0, -2.0 * idx / d)
        out = np.zeros((n, d))
        out[:, 0::2] = np.sin(pos * freq)
        out[:, 1::2] = np.cos(pos * freq)
        return out

    fe = axis_pe(frames, half)  # (F, half)
    te = axis_pe(tokens, half)  # (T, half)
    pe = np.zeros((frames, tokens, dim))
    pe[:, :, :half] = fe[:, None, :]
    pe[:, :, half:] = te[None, :, :]
    return pe


class SlotProjector:
    """Compress a variable-length token sequence to exactly 16 slots.

    Sixteen learned slot queries attend (single head) over the input tokens;
    each output slot is the attention-weighted convex combination of the
    input rows, so outputs always lie inside the inputs' coordinate-wise
    envelope.
    """

    def __init__(self, dim: int, rng: np.random.Generator, slot_count: int = SLOT_COUNT):
        self.dim = dim
        self.slot_count = slot_count
        scale = 1.0 / math.sqrt(dim)
        self.slot_queries = Tensor(rng.standard_normal((slot_count, dim)) * scale, requires_grad=True)
        self.key_proj = Tensor(rng.standard_normal((dim, dim)) * scale, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"slot_queries": self.slot_queries, "key_proj": self.key_proj}

    def attention_logits(self, tokens: Tensor) -> Tensor:
        keys = ag.matmul(tokens, self.key_proj)  # (T_in, D)
        return ag.matmul(self.slot_queries, ag.transpose(keys, (1, 0))) * (1.0 / math.sqrt(self.dim))

    def compress(self, tokens: Tensor, logits_override: Tensor | None = None) -> Tensor:
        """(T_in, D) -> (16, D).  ``logits_override`` lets tests freeze the
        attention map."""
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ShapeError(f"slot compression needs a nonempty (T_in, D) input, got {tokens.shape}")
        logits = self.attention_logits(tokens) if logits_override is None else logits_override
        attn = ag.softmax(logits, axis=-1)
        return ag.matmul(attn, tokens)


def slot_compress(tokens: Tensor, proj: SlotProjector) -> Tensor:
    return proj.compress(tokens)
