"""Events, the decoding vocabulary, and the token-level event serialization.

An event is a (time span, caption) pair.  Serialized form per event:

    <sync> start-tokens(6) end-tokens(6) <sync> caption-tokens...

with a single <eos> terminating the sequence.  The 12 time tokens between a
<sync> pair form two timestamp spellings; <sync> is also the control signal
that switches the decoder between its language-model head and its time head.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

from .temporal import DOT_INDEX, TIME_ALPHABET, detokenize_timestamp, tokenize_timestamp

SYNC = "<sync>"
TIME_MARK = "<time>"
EOS = "<eos>"
TASK_MR = "<mr>"
TASK_SC = "<sc>"
CONTROL_TOKENS = (SYNC, TIME_MARK, EOS, TASK_MR, TASK_SC)

TIME_BLOCK_LEN = 12  # two 6-token timestamps
DOT_POSITIONS = (4, 10)  # slots inside a time block that must be <.>


class EventFormatError(ValueError):
    """Raised for malformed event token sequences."""


@dataclass(frozen=True)
class TimeSpan:
    start: float
    end: float

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise EventFormatError(f"invalid span [{self.start}, {self.end}]")

    def as_list(self) -> list[float]:
        return [self.start, self.end]


@dataclass(frozen=True)
class Event:
    span: TimeSpan
    caption: tuple[int, ...]

    def __post_init__(self):
        if len(self.caption) == 0:
            raise EventFormatError("event caption must be nonempty")


def repaired_span(start: float, end: float, duration: float | None = None) -> TimeSpan:
    """Clamp-and-swap rule for generated spans: swap if reversed, clamp to
    [0, duration] when a duration is known."""
    if end < start:
        start, end = end, start
    if duration is not None:
        start = min(max(start, 0.0), duration)
        end = min(max(end, 0.0), duration)
    return TimeSpan(start, end)


class Vocabulary:
    """Text tokens + control tokens + the 11-symbol time alphabet.

    Ids are laid out as [text..][control..][time alphabet..]; the time ids
    always occupy the trailing 11 slots so head restriction is an id-range
    check.
    """

    def __init__(self, words: list[str]):
        seen = set()
        for w in words:
            if w in seen:
                raise ValueError(f"duplicate word {w!r}")
            if w in CONTROL_TOKENS or w in TIME_ALPHABET:
                raise ValueError(f"word {w!r} collides with a reserved token")
            seen.add(w)
        self.words = list(words)
        self._tokens = self.words + list(CONTROL_TOKENS) + list(TIME_ALPHABET)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        self.n_text = len(self.words)
        self.time_base = self.n_text + len(CONTROL_TOKENS)
        self.sync_id = self._index[SYNC]
        self.eos_id = self._index[EOS]
        self.time_mark_id = self._index[TIME_MARK]
        self.task_ids = {"MR": self._index[TASK_MR], "SC": self._index[TASK_SC]}

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        if token not in self._index:
            raise KeyError(f"unknown token {token!r}")
        return self._index[token]

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.token_of(int(i)) for i in ids]

    def is_time_id(self, idx: int) -> bool:
        return self.time_base <= idx < self.time_base + len(TIME_ALPHABET)

    def is_text_id(self, idx: int) -> bool:
        return 0 <= idx < self.n_text

    def time_alphabet_index(self, idx: int) -> int:
        if not self.is_time_id(idx):
            raise EventFormatError(f"id {idx} is not a time token")
        return idx - self.time_base

    def time_ids_for(self, t: float) -> list[int]:
        return [self.time_base + TIME_ALPHABET.index(tok) for tok in tokenize_timestamp(t)]

    def dot_id(self) -> int:
        return self.time_base + DOT_INDEX

    def digit_ids(self) -> list[int]:
        return [self.time_base + i for i in range(10)]


def serialize_events(events: list[Event], vocab: Vocabulary) -> list[int]:
    """Token ids for an ordered event sequence, terminated by <eos>."""
    prev = None
    for i, e in enumerate(events):
        if prev is not None and e.span.start < prev.span.start:
            raise EventFormatError(
                f"events must be sorted by start: event {i} starts at {e.span.start} "
                f"after {prev.span.start}"
            )
        if prev is not None and e.span.start < prev.span.end:
            warnings.warn(f"events {i - 1} and {i} overlap", stacklevel=2)
        prev = e
    out: list[int] = []
    for e in events:
        out.append(vocab.sync_id)
        out.extend(vocab.time_ids_for(e.span.start))
        out.extend(vocab.time_ids_for(e.span.end))
        out.append(vocab.sync_id)
        out.extend(e.caption)
    out.append(vocab.eos_id)
    return out


def deserialize_events(ids: list[int], vocab: Vocabulary) -> list[Event]:
    """Inverse of ``serialize_events``; raises on malformed sequences."""
    events: list[Event] = []
    i = 0
    n = len(ids)
    while i < n:
        tok = ids[i]
        if tok == vocab.eos_id:
            if i != n - 1:
                raise EventFormatError(f"<eos> at position {i} before end of sequence")
            return events
        if tok != vocab.sync_id:
            raise EventFormatError(f"expected <sync> at position {i}, got {vocab.token_of(tok)!r}")
        block = ids[i + 1 : i + 1 + TIME_BLOCK_LEN]
        if len(block) < TIME_BLOCK_LEN:
            raise EventFormatError(f"truncated time block at position {i + 1}")
        symbols = []
        for j, b in enumerate(block):
            if not vocab.is_time_id(b):
                raise EventFormatError(
                    f"non-time token {vocab.token_of(b)!r} inside time block at position {i + 1 + j}"
                )
            symbols.append(TIME_ALPHABET[vocab.time_alphabet_index(b)])
        start = detokenize_timestamp(symbols[:6])
        end = detokenize_timestamp(symbols[6:])
        i += 1 + TIME_BLOCK_LEN
        if i >= n or ids[i] != vocab.sync_id:
            raise EventFormatError(f"expected closing <sync> at position {i}")
        i += 1
        caption: list[int] = []
        while i < n and ids[i] != vocab.sync_id and ids[i] != vocab.eos_id:
            if vocab.is_time_id(ids[i]):
                raise EventFormatError(f"time token outside a time block at position {i}")
            caption.append(ids[i])
            i += 1
        if not caption:
            raise EventFormatError("event with empty caption")
        events.append(Event(span=TimeSpan(start, end), caption=tuple(caption)))
    raise EventFormatError("sequence not terminated by <eos>")


def parse_generated(
    ids: list[int], vocab: Vocabulary, duration: float | None = None
) -> list[tuple[TimeSpan, tuple[int, ...]]]:
    """Lenient parse of a greedy-decoded stream into (span, caption) fragments.

    Generated sequences are structurally valid by construction (the sampler
    enforces the head automaton), but spans may be reversed or out of range;
    those are repaired via ``repaired_span``.  A fragment's caption may be
    empty when the model stops right after a time block.
    """
    fragments: list[tuple[TimeSpan, tuple[int, ...]]] = []
    i = 0
    n = len(ids)
    while i < n:
        tok = ids[i]
        if tok == vocab.eos_id:
            break
        if tok != vocab.sync_id:
            i += 1  # leading free text before the first event
            continue
        block = ids[i + 1 : i + 1 + TIME_BLOCK_LEN]
        if len(block) < TIME_BLOCK_LEN or not all(vocab.is_time_id(b) for b in block):
            break
        symbols = [TIME_ALPHABET[vocab.time_alphabet_index(b)] for b in block]
        span = repaired_span(
            detokenize_timestamp(symbols[:6]), detokenize_timestamp(symbols[6:]), duration
        )
        i += 1 + TIME_BLOCK_LEN
        if i < n and ids[i] == vocab.sync_id:
            i += 1
        caption: list[int] = []
        while i < n and ids[i] != vocab.sync_id and ids[i] != vocab.eos_id:
            caption.append(ids[i])
            i += 1
        fragments.append((span, tuple(caption)))
    return fragments


def events_from_fragments(fragments) -> list[Event]:
    """Fragments with nonempty captions as proper events."""
    return [Event(span=s, caption=c) for s, c in fragments if c]
