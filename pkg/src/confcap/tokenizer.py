"""Word-level tokenizer with a frozen vocabulary built from the caption grammar.

The vocabulary is fixed at import time: five reserved ids followed by the
grammar words in sorted order. Captions are plain lowercase sentences, split
on whitespace; unknown words map to UNK.
"""

from __future__ import annotations

from dataclasses import dataclass

PAD, BOS, EOS, UNK, CLS = range(5)
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<cls>")

# One (noun, verb) pair per acoustic event template. Index = event id.
EVENTS: tuple[tuple[str, str], ...] = (
    ("dog", "barks"),
    ("cat", "meows"),
    ("bell", "rings"),
    ("siren", "wails"),
    ("drum", "beats"),
    ("bird", "chirps"),
    ("engine", "hums"),
    ("door", "slams"),
    ("rain", "falls"),
    ("wind", "howls"),
    ("glass", "breaks"),
    ("horn", "honks"),
    ("clock", "ticks"),
    ("baby", "cries"),
    ("crowd", "cheers"),
    ("whistle", "blows"),
)
N_EVENTS = len(EVENTS)

_FILLER_WORDS = ("a", "then")

MAX_CAPTION_TOKENS = 24
# BOS + caption + EOS on the decoder side, CLS + caption on the encoder side.
MAX_SEQUENCE_LEN = MAX_CAPTION_TOKENS + 2


def _build_vocab() -> tuple[str, ...]:
    words = sorted({w for pair in EVENTS for w in pair} | set(_FILLER_WORDS))
    return SPECIAL_TOKENS + tuple(words)


VOCAB: tuple[str, ...] = _build_vocab()
VOCAB_SIZE = len(VOCAB)
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def encode_words(text: str) -> list[int]:
    """Tokenize a caption into word ids, mapping unknown words to UNK."""
    return [_WORD_TO_ID.get(w, UNK) for w in text.lower().split()]


def decode_words(ids) -> str:
    """Render word ids back to text, skipping reserved ids."""
    return " ".join(VOCAB[i] for i in ids if i >= len(SPECIAL_TOKENS))


def caption_for_events(event_ids) -> str:
    """Grammar rule: one clause per event, in the given order.

    >>> caption_for_events([0, 2])
    'a dog barks then a bell rings'
    """
    if not event_ids:
        raise ValueError("a caption needs at least one event")
    clauses = [f"a {EVENTS[e][0]} {EVENTS[e][1]}" for e in event_ids]
    return " then ".join(clauses)


@dataclass(frozen=True)
class TokenSequence:
    """Decoder-form token ids: BOS, then caption words, then an optional EOS.

    The EOS may be absent only for sampled sequences cut off at the length
    cap. Reserved ids other than the leading BOS and a terminal EOS are
    rejected, so a sequence is always a straight rendering of a caption.
    """

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) == 0 or self.ids[0] != BOS:
            raise ValueError("token sequence must start with BOS")
        if len(self.ids) > MAX_SEQUENCE_LEN:
            raise ValueError(
                f"token sequence of length {len(self.ids)} exceeds {MAX_SEQUENCE_LEN}"
            )
        interior = self.ids[1:]
        for pos, tok in enumerate(interior):
            if tok < 0:
                raise ValueError("negative token id")
            if tok in (PAD, BOS, CLS):
                raise ValueError(f"reserved id {tok} inside a token sequence")
            if tok == EOS and pos != len(interior) - 1:
                raise ValueError("EOS before the end of a token sequence")

    @classmethod
    def from_caption(cls, text: str) -> "TokenSequence":
        words = encode_words(text)
        if not 1 <= len(words) <= MAX_CAPTION_TOKENS:
            raise ValueError(
                f"caption must tokenize to 1..{MAX_CAPTION_TOKENS} words, got {len(words)}"
            )
        return cls(ids=(BOS, *words, EOS))

    @property
    def has_eos(self) -> bool:
        return self.ids[-1] == EOS

    def words(self) -> tuple[int, ...]:
        end = -1 if self.has_eos else len(self.ids)
        return self.ids[1:end]

    def encoder_ids(self) -> tuple[int, ...]:
        """Encoder-side view: CLS followed by the caption words."""
        return (CLS, *self.words())

    def text(self) -> str:
        return decode_words(self.words())
