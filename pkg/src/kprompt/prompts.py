"""Prompt templates, rendering, word-level tokenization, and prompt fusion.

The masked personalized prompt (MPP) turns a user's history into a cloze
sentence; relation templates turn KG triples into short sentences.  The
fused input is ``[SPE] mpp [SPE] kp [SPE]``.

Users and items keep atomic surface forms (``user_<id>``, ``item_<id>``)
so that generation targets are single tokens and mention spans stay
unambiguous.  The tokenizer is word-level: whitespace splitting with
punctuation split off, specials atomic, unknown words mapped to [UNK].
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import BudgetExceededError

SPECIAL_TOKENS = ("[pad]", "[UNK]", "[mask]", "[SPE]", "[eos]", "[bos]")
PAD_ID, UNK_ID, MASK_ID, SPE_ID, EOS_ID, BOS_ID = range(len(SPECIAL_TOKENS))
MASK_TOKEN = SPECIAL_TOKENS[MASK_ID]
SPE_TOKEN = SPECIAL_TOKENS[SPE_ID]

DEFAULT_MAX_INPUT_TOKENS = 512

_SPECIAL_ALTERNATIVES = "|".join(re.escape(tok) for tok in SPECIAL_TOKENS)
_TOKEN_RE = re.compile(_SPECIAL_ALTERNATIVES + r"|\w+|[^\w\s]")

_MPP_PLACEHOLDERS = ("{user}", "{history}", "{mask}")


def user_surface(user: str) -> str:
    return f"user_{user}"


def item_surface(item: str) -> str:
    return f"item_{item}"


@dataclass(frozen=True)
class MppTemplate:
    """Cloze template over {user}, {history}, and {mask} placeholders."""

    id: int
    pattern: str
    history_separator: str = ", "

    def __post_init__(self):
        for placeholder in _MPP_PLACEHOLDERS:
            count = self.pattern.count(placeholder)
            if count != 1:
                raise ValueError(
                    f"MPP template {self.id}: placeholder {placeholder} occurs "
                    f"{count} times, expected exactly 1"
                )


@dataclass(frozen=True)
class RelationTemplate:
    """Sentence pattern with [X] (head) and [Y] (tail) slots."""

    relation: str
    pattern: str

    def __post_init__(self):
        for placeholder in ("[X]", "[Y]"):
            count = self.pattern.count(placeholder)
            if count != 1:
                raise ValueError(
                    f"relation template {self.relation!r}: {placeholder} occurs "
                    f"{count} times, expected exactly 1"
                )


@dataclass(frozen=True)
class PromptText:
    """Rendered prompt text plus character-span bookkeeping."""

    text: str
    item_spans: tuple[tuple[str, int, int], ...] = ()
    mask_span: tuple[int, int] | None = None


@dataclass(frozen=True)
class TokenSeq:
    """Token ids with one character span per token."""

    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    text: str

    def __len__(self) -> int:
        return len(self.ids)

    def token_range(self, start: int, end: int) -> tuple[int, int]:
        """Token span [lo, hi) of all tokens overlapping chars [start, end)."""
        lo = hi = None
        for idx, (s, e) in enumerate(self.spans):
            if s < end and e > start:
                if lo is None:
                    lo = idx
                hi = idx + 1
        if lo is None:
            raise ValueError(f"char span ({start}, {end}) covers no token")
        return lo, hi


class Vocabulary:
    """Token table with the first six ids reserved for specials."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"first {len(SPECIAL_TOKENS)} tokens must be {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def item_token_ids(self) -> list[int]:
        return [i for i, tok in enumerate(self.tokens) if tok.startswith("item_")]

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        words = set()
        for text in texts:
            for match in _TOKEN_RE.finditer(text):
                words.add(match.group())
        words -= set(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(words))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


def tokenize(text: str, vocab: Vocabulary) -> TokenSeq:
    ids = []
    spans = []
    for match in _TOKEN_RE.finditer(text):
        ids.append(vocab.id_of(match.group()))
        spans.append((match.start(), match.end()))
    return TokenSeq(ids=tuple(ids), spans=tuple(spans), text=text)


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> str:
    return " ".join(vocab.token_of(i) for i in seq.ids)


def render_mpp(template: MppTemplate, user: str, history: list[str]) -> PromptText:
    """Fill an MPP template, recording spans for every item mention.

    History items appear in chronological order joined by the template's
    separator; the mask slot holds the literal mask token.
    """
    if not history:
        raise ValueError("history must be non-empty")
    pieces = re.split(r"(\{user\}|\{history\}|\{mask\})", template.pattern)
    parts: list[str] = []
    pos = 0
    item_spans: list[tuple[str, int, int]] = []
    mask_span = None

    def emit(chunk: str) -> None:
        nonlocal pos
        parts.append(chunk)
        pos += len(chunk)

    for piece in pieces:
        if piece == "{user}":
            emit(user_surface(user))
        elif piece == "{mask}":
            start = pos
            emit(MASK_TOKEN)
            mask_span = (start, pos)
        elif piece == "{history}":
            for idx, item in enumerate(history):
                if idx:
                    emit(template.history_separator)
                surf = item_surface(item)
                start = pos
                emit(surf)
                item_spans.append((item, start, pos))
        else:
            emit(piece)
    return PromptText(text="".join(parts), item_spans=tuple(item_spans), mask_span=mask_span)


def render_triple(template: RelationTemplate, head_name: str, tail_name: str) -> PromptText:
    """Substitute head and tail names into a relation template."""
    if not head_name or not tail_name:
        raise ValueError("entity names must be non-empty")
    pieces = re.split(r"(\[X\]|\[Y\])", template.pattern)
    parts = [head_name if p == "[X]" else tail_name if p == "[Y]" else p for p in pieces]
    return PromptText(text="".join(parts))


def fuse_prompt(
    mpp: TokenSeq, kp: TokenSeq, max_input_tokens: int = DEFAULT_MAX_INPUT_TOKENS
) -> TokenSeq:
    """Concatenate ``[SPE] mpp [SPE] kp [SPE]`` with spans re-offset.

    Over-length inputs raise instead of clipping: silent truncation would
    desynchronize knowledge-tree nodes from their token spans.
    """
    required = len(mpp) + len(kp) + 3
    if required > max_input_tokens:
        raise BudgetExceededError(required, max_input_tokens)

    spe = SPE_TOKEN
    mpp_off = len(spe) + 1
    mid_spe_start = mpp_off + len(mpp.text) + 1
    kp_off = mid_spe_start + len(spe) + 1
    if kp.text:
        text = f"{spe} {mpp.text} {spe} {kp.text} {spe}"
        last_spe_start = kp_off + len(kp.text) + 1
    else:
        text = f"{spe} {mpp.text} {spe} {spe}"
        last_spe_start = mid_spe_start + len(spe) + 1

    ids = (SPE_ID,) + mpp.ids + (SPE_ID,) + kp.ids + (SPE_ID,)
    spans = (
        [(0, len(spe))]
        + [(s + mpp_off, e + mpp_off) for s, e in mpp.spans]
        + [(mid_spe_start, mid_spe_start + len(spe))]
        + [(s + kp_off, e + kp_off) for s, e in kp.spans]
        + [(last_spe_start, last_spe_start + len(spe))]
    )
    return TokenSeq(ids=ids, spans=tuple(spans), text=text)


def load_mpp_templates(path) -> list[MppTemplate]:
    """Read a JSON array of {id, pattern[, history_separator]} objects."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    templates = []
    for entry in raw:
        templates.append(
            MppTemplate(
                id=int(entry["id"]),
                pattern=entry["pattern"],
                history_separator=entry.get("history_separator", ", "),
            )
        )
    return templates


def save_mpp_templates(templates: list[MppTemplate], path) -> None:
    payload = [
        {"id": t.id, "pattern": t.pattern, "history_separator": t.history_separator}
        for t in templates
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def load_relation_templates(path) -> dict[str, RelationTemplate]:
    """Read a JSON object mapping relation id to pattern."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {rel: RelationTemplate(relation=rel, pattern=pattern) for rel, pattern in raw.items()}


def save_relation_templates(templates: dict[str, RelationTemplate], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({rel: t.pattern for rel, t in templates.items()}, fh, indent=2)


# Eleven cloze templates per dataset; convention: train on 1-10, evaluate
# on 1, hold out 11 for template-generalization probes.
DEFAULT_MPP_TEMPLATES = [
    MppTemplate(1, "User {user} has previously interacted with {history}, and is going to interact with {mask} next."),
    MppTemplate(2, "Here is the interaction history of user {user}: {history}. Predict the next item: {mask}"),
    MppTemplate(3, "{user} recently consumed {history}. The next item will be {mask}."),
    MppTemplate(4, "Given that user {user} engaged with {history}, the item chosen next is {mask}."),
    MppTemplate(5, "The sequence {history} belongs to user {user}. Next comes {mask}."),
    MppTemplate(6, "User {user} interacted with {history} in order, and will pick {mask} afterwards."),
    MppTemplate(7, "After {history}, user {user} moves on to {mask}."),
    MppTemplate(8, "Considering the history {history} of user {user}, recommend {mask}."),
    MppTemplate(9, "The timeline of user {user} is {history}; the following item is {mask}."),
    MppTemplate(10, "Items {history} were chosen by user {user}, who will next choose {mask}."),
    MppTemplate(11, "For user {user} with past interactions {history}, the upcoming item is {mask}."),
]
