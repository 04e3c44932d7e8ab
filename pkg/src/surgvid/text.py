"""Phase vocabulary, prompt templating and the frozen text embedder.

The embedder is a fixed lookup table: lowercase whitespace tokens map to
rows drawn once from a seeded normal distribution. The training corpus only
ever contains four prompts, so any injective frozen embedding is enough;
swap in a real encoder behind ``encode_text`` for open-vocabulary use.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InputError, PromptParseError

PROMPT_PREFIX = "Laparoscopic cholecystectomy during "
TEXT_SEED = 7
L_TEXT = 8
D_TEXT = 64
PAD = "<pad>"
UNK = "<unk>"


class SurgicalPhase(enum.IntEnum):
    PREPARATION = 0
    CALOT_TRIANGLE_DISSECTION = 1
    CLIPPING_AND_CUTTING = 2
    GALLBLADDER_DISSECTION = 3

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def from_display(cls, name: str) -> "SurgicalPhase":
        try:
            return _BY_DISPLAY[name.strip().lower()]
        except KeyError:
            raise PromptParseError(f"unknown phase {name!r}; expected one of {legal_phrases()}") from None


_DISPLAY = {
    SurgicalPhase.PREPARATION: "preparation",
    SurgicalPhase.CALOT_TRIANGLE_DISSECTION: "calot triangle dissection",
    SurgicalPhase.CLIPPING_AND_CUTTING: "clipping and cutting",
    SurgicalPhase.GALLBLADDER_DISSECTION: "gallbladder dissection",
}
_BY_DISPLAY = {v: k for k, v in _DISPLAY.items()}

PHASES = tuple(SurgicalPhase)


def format_prompt(phase: SurgicalPhase) -> str:
    return PROMPT_PREFIX + SurgicalPhase(phase).display


def legal_phrases() -> list[str]:
    return [format_prompt(p) for p in PHASES]


def parse_phase(prompt: str) -> SurgicalPhase:
    """Inverse of :func:`format_prompt`, case-insensitive."""
    norm = " ".join(prompt.strip().lower().split())
    prefix = PROMPT_PREFIX.lower()
    if norm.startswith(prefix):
        phase = _BY_DISPLAY.get(norm[len(prefix):])
        if phase is not None:
            return phase
    raise PromptParseError(
        f"cannot parse prompt {prompt!r}; legal prompts are: " + "; ".join(legal_phrases())
    )


def _default_vocab() -> list[str]:
    words = PROMPT_PREFIX.lower().split()
    for p in PHASES:
        words.extend(p.display.split())
    seen = []
    for w in words:
        if w not in seen:
            seen.append(w)
    return [PAD, UNK] + seen


@dataclass(frozen=True)
class TokenizerTable:
    vocab: tuple[str, ...]
    table: np.ndarray  # [len(vocab), d_text], float32, read-only
    length: int = L_TEXT
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.table.setflags(write=False)
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.vocab)})

    @classmethod
    def build(cls, vocab=None, d_text: int = D_TEXT, length: int = L_TEXT, seed: int = TEXT_SEED):
        vocab = tuple(vocab or _default_vocab())
        rng = np.random.default_rng(seed)
        table = rng.normal(0.0, 1.0 / np.sqrt(d_text), size=(len(vocab), d_text)).astype(np.float32)
        return cls(vocab, table, length)

    @property
    def d_text(self) -> int:
        return int(self.table.shape[1])

    def tokenize(self, prompt: str) -> list[int]:
        ids = [self.index.get(tok, self.index[UNK]) for tok in prompt.lower().split()]
        ids = ids[: self.length]
        return ids + [self.index[PAD]] * (self.length - len(ids))

    def null_embedding(self) -> torch.Tensor:
        """All-pad embedding used as the unconditional input for guidance."""
        return torch.from_numpy(np.repeat(self.table[[self.index[PAD]]], self.length, axis=0))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.vocab).encode())
        h.update(np.ascontiguousarray(self.table).tobytes())
        return h.hexdigest()


def encode_text(prompt: str, vocab: TokenizerTable) -> torch.Tensor:
    if not prompt or not prompt.strip():
        raise InputError("empty prompt")
    ids = vocab.tokenize(prompt)
    return torch.from_numpy(vocab.table[ids].copy())


@dataclass(frozen=True)
class PromptCondition:
    phase: SurgicalPhase
    text: str
    embedding: torch.Tensor

    @classmethod
    def for_phase(cls, phase: SurgicalPhase, vocab: TokenizerTable) -> "PromptCondition":
        text = format_prompt(phase)
        return cls(SurgicalPhase(phase), text, encode_text(text, vocab))
