"""The assembled desk-scale model: query encoder, fusion connector, time
encoder, causal decoder, and the two output heads.

Decoder input layout per sample::

    [ frame time features | fused query-conditioned tokens | prompt | answer ]

The answer region is teacher-forced during training and grown token by token
during greedy decoding.  Time-alphabet positions are scored by an 11-way time
head, everything else by the full-vocabulary LM head; the <sync> token toggles
between the two at generation time.

Parameter names are group-prefixed (connector/, time_encoder/, time_head/,
lm_head/, backbone/) so the staged training harness can freeze by prefix.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, Tensor
from .connector import (
    FUSION_ADAPTIVE,
    ConnectorOutput,
    ModalityBundle,
    connector_forward,
    init_connector,
)
from .events import (
    TIME_BLOCK_LEN,
    DOT_POSITIONS,
    Event,
    TimeSpan,
    Vocabulary,
    events_from_fragments,
    parse_generated,
    serialize_events,
)
from .temporal import TIME_ALPHABET, sample_frames, time_token_ids

PARAM_GROUPS = ("connector", "time_encoder", "time_head", "lm_head", "backbone")

# fixed per-slot mixing weights for pooling a 6-token timestamp spelling into
# one track token; distinct positive values keep distinct digit orders distinct
TIME_POOL_WEIGHTS = np.array([1.0 / (j + 1) for j in range(6)])
TIME_POOL_WEIGHTS /= TIME_POOL_WEIGHTS.sum()


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent, order-free stream per (seed, parameter name)."""
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(name.encode()))))


@dataclass
class ModelConfig:
    d: int = 64
    d_llm: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    frames: int = 32
    slots: int = 16
    tau: float = 1.0
    time_track: str = "pooled"  # "pooled": one token per frame; "full": six

    def __post_init__(self):
        if self.d_llm % self.n_heads != 0:
            raise ValueError(f"d_llm={self.d_llm} not divisible by n_heads={self.n_heads}")
        if self.time_track not in ("pooled", "full"):
            raise ValueError(f"unknown time_track mode {self.time_track!r}")

    def to_dict(self) -> dict:
        return {
            "d": self.d, "d_llm": self.d_llm, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "d_ff": self.d_ff, "frames": self.frames,
            "slots": self.slots, "tau": self.tau, "time_track": self.time_track,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GenerationResult:
    """Per-sample decode output."""

    token_ids: list[int]
    events: list[Event]
    fragments: list[tuple[TimeSpan, tuple[int, ...]]]
    truncated: bool
    weights: np.ndarray  # (3,) fusion weights used for this sample


class TriModalModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.store = ParameterStore()
        self._pe_cache: dict[int, np.ndarray] = {}
        self._build(seed)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, shape: tuple[int, ...], scale: float, seed: int) -> Tensor:
        return self.store.add(name, rng_for(seed, name).standard_normal(shape) * scale)

    def _build(self, seed: int):
        cfg = self.config
        self.connector = init_connector(
            self.store, cfg.d, cfg.d_llm, rng_for(seed, "connector"),
            tau=cfg.tau, d_query_in=cfg.d_llm,
        )
        s_llm = 1.0 / math.sqrt(cfg.d_llm)
        self.time_table = self._add("time_encoder/table", (len(TIME_ALPHABET), cfg.d_llm), 0.5, seed)
        n_plain = len(self.vocab) - len(TIME_ALPHABET)
        self.tok_table = self._add("backbone/tok_table", (n_plain, cfg.d_llm), 0.5, seed)
        self.layers = []
        for i in range(cfg.n_layers):
            pre = f"backbone/layer{i}/"
            layer = {
                "wq": self._add(pre + "wq", (cfg.d_llm, cfg.d_llm), s_llm, seed),
                "wk": self._add(pre + "wk", (cfg.d_llm, cfg.d_llm), s_llm, seed),
                "wv": self._add(pre + "wv", (cfg.d_llm, cfg.d_llm), s_llm, seed),
                "wo": self._add(pre + "wo", (cfg.d_llm, cfg.d_llm), s_llm, seed),
                "ln1_g": self.store.add(pre + "ln1_g", np.ones(cfg.d_llm)),
                "ln1_b": self.store.add(pre + "ln1_b", np.zeros(cfg.d_llm)),
                "ln2_g": self.store.add(pre + "ln2_g", np.ones(cfg.d_llm)),
                "ln2_b": self.store.add(pre + "ln2_b", np.zeros(cfg.d_llm)),
                "mlp_w1": self._add(pre + "mlp_w1", (cfg.d_llm, cfg.d_ff), s_llm, seed),
                "mlp_b1": self.store.add(pre + "mlp_b1", np.zeros(cfg.d_ff)),
                "mlp_w2": self._add(pre + "mlp_w2", (cfg.d_ff, cfg.d_llm), 1.0 / math.sqrt(cfg.d_ff), seed),
                "mlp_b2": self.store.add(pre + "mlp_b2", np.zeros(cfg.d_llm)),
            }
            self.layers.append(layer)
        self.ln_f_g = self.store.add("backbone/ln_f_g", np.ones(cfg.d_llm))
        self.ln_f_b = self.store.add("backbone/ln_f_b", np.zeros(cfg.d_llm))
        self.time_head_w = self._add("time_head/w", (cfg.d_llm, len(TIME_ALPHABET)), s_llm, seed)
        self.time_head_b = self.store.add("time_head/b", np.zeros(len(TIME_ALPHABET)))
        self.lm_head_w = self._add("lm_head/w", (cfg.d_llm, len(self.vocab)), s_llm, seed)
        self.lm_head_b = self.store.add("lm_head/b", np.zeros(len(self.vocab)))

    # -- embeddings -----------------------------------------------------------

    def effective_table(self) -> Tensor:
        """Token embeddings with the time alphabet routed through the time
        encoder's table (vocab ids for time symbols are the trailing rows)."""
        return ag.concat([self.tok_table, self.time_table], axis=0)

    def embed_ids(self, ids: np.ndarray) -> Tensor:
        return ag.embedding(self.effective_table(), np.asarray(ids, dtype=np.int64))

    def encode_query(self, query_ids: np.ndarray) -> Tensor:
        """(B, L) token ids -> (B, L, d) connector-space query encoding."""
        return ag.matmul(self.embed_ids(query_ids), self.connector.query_proj)

    def time_track(self, durations: np.ndarray) -> Tensor:
        """Frame-timestamp features: (B, F, d_llm) pooled or (B, 6F, d_llm) full."""
        cfg = self.config
        ids = np.zeros((len(durations), cfg.frames, 6), dtype=np.int64)
        for i, dur in enumerate(durations):
            plan = sample_frames(float(dur), cfg.frames)
            for f, t in enumerate(plan.timestamps):
                ids[i, f] = time_token_ids(t)
        emb = ag.embedding(self.time_table, ids)  # (B, F, 6, d_llm)
        if cfg.time_track == "full":
            b = ids.shape[0]
            return ag.reshape(emb, (b, cfg.frames * 6, cfg.d_llm))
        w = Tensor(TIME_POOL_WEIGHTS.reshape(1, 1, 6, 1))
        return ag.tsum(emb * w, axis=2)

    def _seq_pe(self, n: int) -> np.ndarray:
        if n not in self._pe_cache:
            d = self.config.d_llm
            pos = np.arange(n, dtype=np.float64)[:, None]
            idx = np.arange(d // 2, dtype=np.float64)[None, :]
            freq = np.power(10000.0, -2.0 * idx / d)
            pe = np.zeros((n, d))
            pe[:, 0::2] = np.sin(pos * freq)
            pe[:, 1::2] = np.cos(pos * freq)
            self._pe_cache[n] = pe
        return self._pe_cache[n]

    # -- decoder ----------------------------------------------------------------

    def decode_hidden(self, emb: Tensor) -> Tensor:
        """Causal transformer over an assembled (B, T, d_llm) sequence."""
        cfg = self.config
        b, t, d = emb.shape
        h = emb + Tensor(self._seq_pe(t))
        mask = np.triu(np.full((t, t), -1e9), k=1)
        dh = d // cfg.n_heads
        for layer in self.layers:
            x = ag.layer_norm(h, layer["ln1_g"], layer["ln1_b"])

            def split(m):
                return ag.transpose(
                    ag.reshape(ag.matmul(x, layer[m]), (b, t, cfg.n_heads, dh)), (0, 2, 1, 3)
                )

            q, k, v = split("wq"), split("wk"), split("wv")
            scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
            attn = ag.softmax(scores + Tensor(mask), axis=-1)
            ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
            h = h + ag.matmul(ctx, layer["wo"])
            x2 = ag.layer_norm(h, layer["ln2_g"], layer["ln2_b"])
            ff = ag.matmul(ag.tanh(ag.matmul(x2, layer["mlp_w1"]) + layer["mlp_b1"]), layer["mlp_w2"])
            h = h + ff + layer["mlp_b2"]
        return ag.layer_norm(h, self.ln_f_g, self.ln_f_b)

    def head_logits(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        lm = ag.matmul(hidden, self.lm_head_w) + self.lm_head_b
        time = ag.matmul(hidden, self.time_head_w) + self.time_head_b
        return lm, time

    # -- context assembly ----------------------------------------------------------

    def assemble_prefix(
        self,
        bundle: ModalityBundle,
        query_ids: np.ndarray,
        prompt_ids: np.ndarray,
        durations: np.ndarray,
        fusion_mode: str = FUSION_ADAPTIVE,
    ) -> tuple[Tensor, ConnectorOutput]:
        """Context before the answer region: time track ++ fused ++ prompt."""
        query = self.encode_query(query_ids)
        out = connector_forward(bundle, query, self.connector, mode=fusion_mode)
        track = self.time_track(durations)
        prompt = self.embed_ids(prompt_ids)
        return ag.concat([track, out.tokens, prompt], axis=1), out

    # -- training loss ----------------------------------------------------------------

    def batch_nll(
        self,
        bundle: ModalityBundle,
        query_ids: np.ndarray,
        prompt_ids: np.ndarray,
        target_ids: np.ndarray,
        durations: np.ndarray,
        fusion_mode: str = FUSION_ADAPTIVE,
    ) -> tuple[Tensor, int]:
        """Teacher-forced token NLL summed over the batch's answer tokens.

        Time-alphabet positions are scored by the time head (11-way), others
        by the LM head; head choice follows the gold token type.  Returns the
        summed loss and the token count.
        """
        target_ids = np.asarray(target_ids, dtype=np.int64)
        b, t_tgt = target_ids.shape
        prefix, _ = self.assemble_prefix(bundle, query_ids, prompt_ids, durations, fusion_mode)
        tf_inputs = self.embed_ids(target_ids[:, :-1]) if t_tgt > 1 else None
        emb = prefix if tf_inputs is None else ag.concat([prefix, tf_inputs], axis=1)
        hidden = self.decode_hidden(emb)
        p = prefix.shape[1]
        score = _slice_time(hidden, p - 1, t_tgt)
        lm_logits, time_logits = self.head_logits(score)
        lm_nll = -ag.gather_last(ag.log_softmax(lm_logits, axis=-1), target_ids)
        tb = self.vocab.time_base
        is_time = (target_ids >= tb).astype(np.float64)
        time_targets = np.where(target_ids >= tb, target_ids - tb, 0)
        time_nll = -ag.gather_last(ag.log_softmax(time_logits, axis=-1), time_targets)
        per_tok = time_nll * Tensor(is_time) + lm_nll * Tensor(1.0 - is_time)
        return ag.tsum(per_tok), b * t_tgt

    def event_nll(
        self,
        bundle: ModalityBundle,
        query_ids: np.ndarray,
        target: Event,
        durations: np.ndarray,
        prior: list[Event] | None = None,
        include_eos: bool = True,
        fusion_mode: str = FUSION_ADAPTIVE,
    ) -> Tensor:
        """Summed NLL of one next event given serialized prior events."""
        prior_tokens: list[int] = []
        if prior:
            prior_tokens = serialize_events(prior, self.vocab)[:-1]  # drop <eos>
        prompt = np.array([[self.vocab.task_ids["MR"]] + prior_tokens], dtype=np.int64)
        target_tokens = serialize_events([target], self.vocab)
        if not include_eos:
            target_tokens = target_tokens[:-1]
        loss, _ = self.batch_nll(
            bundle, query_ids, prompt, np.array([target_tokens]), durations, fusion_mode
        )
        return loss

    # -- generation ---------------------------------------------------------------------

    def generate(
        self,
        bundle: ModalityBundle,
        query_ids: np.ndarray,
        prompt_ids: np.ndarray,
        durations: np.ndarray,
        max_events: int = 4,
        max_new_tokens: int | None = None,
        allow_time_blocks: bool = True,
        fusion_mode: str = FUSION_ADAPTIVE,
    ) -> list[GenerationResult]:
        """Batched greedy decoding with <sync>-driven head switching.

        The decoder starts on the LM head.  Emitting <sync> enters a time
        block: exactly 12 time-alphabet tokens follow (digit slots restricted
        to digits, slots 4 and 10 forced to <.>), then a forced closing
        <sync> returns control to the LM head.  Decoding stops at <eos>,
        after ``max_events`` completed time blocks once the current caption
        closes, or at the token cap (flagged as truncated).
        """
        vocab = self.vocab
        cfg = self.config
        b = query_ids.shape[0]
        if max_new_tokens is None:
            max_new_tokens = max_events * (TIME_BLOCK_LEN + 2 + 12) + 4

        with ag.no_grad():
            prefix, conn = self.assemble_prefix(
                bundle, query_ids, prompt_ids, durations, fusion_mode
            )
            prefix_data = prefix.data

            lm_allowed = np.zeros(len(vocab))
            lm_allowed[: vocab.n_text] = 1.0
            lm_allowed[vocab.eos_id] = 1.0
            if allow_time_blocks:
                lm_allowed[vocab.sync_id] = 1.0
            digit_mask = np.zeros(len(TIME_ALPHABET))
            digit_mask[:10] = 1.0

            modes = ["LM"] * b  # LM | TIME | CLOSE
            tpos = [0] * b
            blocks_done = [0] * b
            finished = [False] * b
            truncated = [False] * b
            out_ids: list[list[int]] = [[] for _ in range(b)]

            for _ in range(max_new_tokens):
                if all(finished):
                    break
                gen_len = len(out_ids[0])
                if gen_len:
                    gen = np.array(out_ids, dtype=np.int64)
                    emb = np.concatenate([prefix_data, self.embed_ids(gen).data], axis=1)
                else:
                    emb = prefix_data
                hidden = self.decode_hidden(Tensor(emb))
                last = Tensor(hidden.data[:, -1, :])
                lm_logits, time_logits = self.head_logits(last)
                lm_np, time_np = lm_logits.data, time_logits.data

                for i in range(b):
                    if finished[i]:
                        out_ids[i].append(vocab.eos_id)
                        continue
                    if modes[i] == "CLOSE":
                        nxt = vocab.sync_id
                        modes[i] = "LM"
                    elif modes[i] == "TIME":
                        if tpos[i] in DOT_POSITIONS:
                            nxt = vocab.dot_id()
                        else:
                            masked = np.where(digit_mask > 0, time_np[i], -np.inf)
                            nxt = vocab.time_base + int(np.argmax(masked))
                        tpos[i] += 1
                        if tpos[i] == TIME_BLOCK_LEN:
                            modes[i] = "CLOSE"
                            blocks_done[i] += 1
                    else:  # LM
                        masked = np.where(lm_allowed > 0, lm_np[i], -np.inf)
                        nxt = int(np.argmax(masked))
                        if nxt == vocab.sync_id:
                            if blocks_done[i] >= max_events:
                                nxt = vocab.eos_id
                            else:
                                modes[i] = "TIME"
                                tpos[i] = 0
                        if nxt == vocab.eos_id:
                            finished[i] = True
                    out_ids[i].append(nxt)

            results = []
            for i in range(b):
                ids = out_ids[i]
                if not finished[i]:
                    truncated[i] = True
                if vocab.eos_id in ids:
                    ids = ids[: ids.index(vocab.eos_id)]
                frags = parse_generated(ids, vocab, duration=float(durations[i]))
                results.append(
                    GenerationResult(
                        token_ids=ids,
                        events=events_from_fragments(frags),
                        fragments=frags,
                        truncated=truncated[i],
                        weights=conn.weights.data[i].copy(),
                    )
                )
            return results

    # -- task wrappers -----------------------------------------------------------------

    def moment_retrieval(
        self,
        bundle: ModalityBundle,
        query_ids: np.ndarray,
        durations: np.ndarray,
        fusion_mode: str = FUSION_ADAPTIVE,
        max_events: int = 1,
    ) -> list[tuple[TimeSpan | None, np.ndarray]]:
        """First emitted span per sample (None when nothing was emitted)."""
        b = query_ids.shape[0]
        prompt = np.full((b, 1), self.vocab.task_ids["MR"], dtype=np.int64)
        results = self.generate(
            bundle, query_ids, prompt, durations,
            max_events=max_events, fusion_mode=fusion_mode,
        )
        out = []
        for r in results:
            span = r.fragments[0][0] if r.fragments else None
            out.append((span, r.weights))
        return out

    def segment_caption(
        self,
        bundle: ModalityBundle,
        query_ids: np.ndarray,
        spans: list[TimeSpan],
        durations: np.ndarray,
        fusion_mode: str = FUSION_ADAPTIVE,
        max_tokens: int = 12,
    ) -> list[tuple[list[int], np.ndarray]]:
        """Caption token ids for gold spans included in the prompt."""
        vocab = self.vocab
        prompts = []
        for span in spans:
            prompts.append(
                [vocab.task_ids["SC"], vocab.sync_id]
                + vocab.time_ids_for(span.start)
                + vocab.time_ids_for(span.end)
                + [vocab.sync_id]
            )
        results = self.generate(
            bundle, query_ids, np.array(prompts, dtype=np.int64), durations,
            max_events=0, max_new_tokens=max_tokens,
            allow_time_blocks=False, fusion_mode=fusion_mode,
        )
        return [(r.token_ids, r.weights) for r in results]

    # -- persistence ---------------------------------------------------------------------

    def save_checkpoint(self, path, extra: dict | None = None):
        state = self.store.state_dict()
        state["config"] = self.config.to_dict()
        state["vocab_words"] = self.vocab.words
        if extra:
            state["extra"] = extra
        import json

        with open(path, "w", encoding="utf-8") as fh:
            json.dump(state, fh)

    @classmethod
    def load_checkpoint(cls, path) -> "TriModalModel":
        import json

        with open(path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
        config = ModelConfig.from_dict(state["config"])
        vocab = Vocabulary(state["vocab_words"])
        model = cls(config, vocab, seed=0)
        model.store.load_state_dict({"version": state["version"], "params": state["params"]})
        return model


def _slice_time(x: Tensor, start: int, length: int) -> Tensor:
    """Differentiable slice along axis 1."""
    data = x.data[:, start : start + length]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start : start + length] = g
        return ((x, gx),)

    return ag._make(data, (x,), bw)
