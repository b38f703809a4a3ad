"""Recall-first entity analysis over dialogue messages.

Each message is analyzed inside a centered context window (its immediate
neighbors by default). A recognizer returns IO-tagged tokens with character
ranges over the target message; token tags are aggregated to word-level
spans (a word takes the tag of the first token that intersects it, and
consecutive same-label words merge into one span), then span edges are
trimmed of punctuation.

Two recognizers ship here: a pure regex/gazetteer rule recognizer, and an
HTTP adapter for an external token-labeling model. Anything implementing
``recognize(window) -> list[TokenLabel]`` can be plugged in. Implementations
that are not safe for concurrent calls should set ``serial = True``; the CLI
then funnels their calls through one lane.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from .corpus import Dialogue, EntityLabel, Message, Span, SpanSource

WORD_RE = re.compile(r"\S+")

# Most specific label wins when overlapping rule matches claim one word.
DEFAULT_LABEL_PRIORITY = (
    EntityLabel.EMAIL_SOCIAL,
    EntityLabel.URL,
    EntityLabel.PHONE_NUMBER,
    EntityLabel.DATE_OF_BIRTH,
    EntityLabel.SCHOOL_NAME,
    EntityLabel.LOCATION_ADDRESS,
    EntityLabel.NAME,
)

PATTERN_LABELS = frozenset(
    {EntityLabel.URL, EntityLabel.EMAIL_SOCIAL, EntityLabel.PHONE_NUMBER, EntityLabel.DATE_OF_BIRTH}
)
GAZETTEER_LABELS = frozenset(
    {EntityLabel.NAME, EntityLabel.SCHOOL_NAME, EntityLabel.LOCATION_ADDRESS}
)

OUTSIDE_TAG = "O"


class AnalysisError(Exception):
    """Base class for analysis-stage failures."""


class RulesConfigError(AnalysisError):
    """The rule recognizer configuration is invalid."""


class RecognizerError(AnalysisError):
    """A recognizer failed; carries the dialogue and message it failed on."""

    def __init__(self, dialogue_id: str, message_index: int, detail: str):
        self.dialogue_id = dialogue_id
        self.message_index = message_index
        super().__init__(
            f"recognizer failed on dialogue {dialogue_id!r} message {message_index}: {detail}"
        )


class AdapterError(AnalysisError):
    """The model endpoint misbehaved (transport, shape, or invariant)."""


def tag_for(label: EntityLabel) -> str:
    return f"I-{label.wire}"


def label_from_tag(tag: str) -> EntityLabel | None:
    """Decode an IO tag; returns None for the outside tag, raises on junk."""
    if tag == OUTSIDE_TAG:
        return None
    if tag.startswith("I-"):
        try:
            return EntityLabel(tag[2:])
        except ValueError:
            pass
    raise ValueError(f"invalid IO tag {tag!r}")


@dataclass(frozen=True, slots=True)
class TokenLabel:
    """An IO-tagged token with its character range in the target message."""

    text: str
    start: int
    end: int
    tag: str


@dataclass(frozen=True, slots=True)
class ContextWindow:
    previous: Message | None
    target: Message
    next: Message | None


class Recognizer(Protocol):
    """Token labeler over the target message of a context window."""

    def recognize(self, window: ContextWindow) -> list[TokenLabel]: ...


def build_context_window(d: Dialogue, i: int, size: int = 1) -> ContextWindow:
    """Center a window on message ``i`` with up to ``size`` neighbors per side.

    With ``size > 1`` the neighbor texts are space-joined into a single
    synthetic neighbor message carrying the nearest neighbor's index and
    speaker, so the window shape stays (previous, target, next).
    """
    if not 0 <= i < len(d.messages):
        raise IndexError(f"message index {i} out of range for dialogue {d.id!r}")
    if size < 1:
        raise ValueError("window size must be >= 1")
    before = d.messages[max(0, i - size) : i]
    after = d.messages[i + 1 : i + 1 + size]
    return ContextWindow(
        previous=_join_neighbors(before, nearest_last=True),
        target=d.messages[i],
        next=_join_neighbors(after, nearest_last=False),
    )


def _join_neighbors(messages: Sequence[Message], nearest_last: bool) -> Message | None:
    if not messages:
        return None
    if len(messages) == 1:
        return messages[0]
    nearest = messages[-1] if nearest_last else messages[0]
    return Message(
        index=nearest.index,
        speaker=nearest.speaker,
        text=" ".join(m.text for m in messages),
    )


def word_ranges(text: str) -> list[tuple[int, int]]:
    """Maximal runs of non-whitespace, as (start, end) character offsets."""
    return [(m.start(), m.end()) for m in WORD_RE.finditer(text)]


def validate_token_labels(tokens: Sequence[TokenLabel], text: str) -> None:
    previous_end = 0
    for token in tokens:
        if not 0 <= token.start < token.end <= len(text):
            raise ValueError(
                f"token range [{token.start}, {token.end}) invalid for text of length {len(text)}"
            )
        if token.start < previous_end:
            raise ValueError(
                f"token ranges must be ordered and non-overlapping, "
                f"[{token.start}, {token.end}) begins before {previous_end}"
            )
        previous_end = token.end
        label_from_tag(token.tag)


def aggregate_to_word_spans(
    msg: Message, tokens: Sequence[TokenLabel], source: SpanSource = SpanSource.MODEL
) -> list[Span]:
    """Resolve token-level IO tags into word-level spans.

    A word (maximal non-whitespace run) takes the tag of the first token
    whose range intersects it; words touched by no token are outside. Runs
    of consecutive words sharing one inside label collapse into one span
    from the first word's start to the last word's end.
    """
    validate_token_labels(tokens, msg.text)
    words = word_ranges(msg.text)
    tags: list[str] = []
    for ws, we in words:
        tag = OUTSIDE_TAG
        for token in tokens:
            if token.start >= we:
                break
            if token.end > ws:
                tag = token.tag
                break
        tags.append(tag)

    spans: list[Span] = []
    i = 0
    while i < len(words):
        if tags[i] == OUTSIDE_TAG:
            i += 1
            continue
        j = i
        while j + 1 < len(words) and tags[j + 1] == tags[i]:
            j += 1
        label = label_from_tag(tags[i])
        assert label is not None
        spans.append(Span(msg.index, words[i][0], words[j][1], label, source))
        i = j + 1
    return spans


def _is_edge_punctuation(ch: str) -> bool:
    # All of Unicode P* plus the quote-like symbols that fall under S*.
    return unicodedata.category(ch).startswith("P") or ch in "`´"


def trim_span_punctuation(span: Span, text: str) -> Span | None:
    """Strip punctuation and quote marks from span edges; None if nothing survives.

    Only the ends move, so apostrophes inside a word are never touched.
    Idempotent: trimming a trimmed span is a no-op.
    """
    start, end = span.start, span.end
    while start < end and _is_edge_punctuation(text[start]):
        start += 1
    while end > start and _is_edge_punctuation(text[end - 1]):
        end -= 1
    if start == end:
        return None
    if (start, end) == (span.start, span.end):
        return span
    return replace(span, start=start, end=end)


def analyze_dialogue(d: Dialogue, recognizer: Recognizer, window_size: int = 1) -> list[Span]:
    """Run the full analysis pass over one dialogue.

    Pure given the recognizer's outputs; degenerate (blank) messages are
    skipped. Recognizer exceptions surface as :class:`RecognizerError`
    naming the message.
    """
    source = getattr(recognizer, "source", SpanSource.MODEL)
    spans: list[Span] = []
    for msg in d.messages:
        if msg.is_degenerate:
            continue
        window = build_context_window(d, msg.index, window_size)
        try:
            tokens = recognizer.recognize(window)
        except Exception as exc:
            raise RecognizerError(d.id, msg.index, str(exc)) from exc
        for span in aggregate_to_word_spans(msg, tokens, source):
            trimmed = trim_span_punctuation(span, msg.text)
            if trimmed is not None:
                spans.append(trimmed)
    return spans


@dataclass(frozen=True)
class RulesConfig:
    """Patterns and gazetteers for the rule recognizer, keyed by label.

    Patterns apply to verifiable shapes (URLs, emails, phones, birth dates);
    gazetteers are word lists for names, schools, and locations. Priority
    breaks ties when overlapping matches claim the same word.
    """

    patterns: dict[EntityLabel, tuple[re.Pattern[str], ...]] = field(default_factory=dict)
    gazetteers: dict[EntityLabel, tuple[str, ...]] = field(default_factory=dict)
    priority: tuple[EntityLabel, ...] = DEFAULT_LABEL_PRIORITY

    def __post_init__(self) -> None:
        for label in self.patterns:
            if label not in PATTERN_LABELS:
                raise RulesConfigError(f"label {label.wire!r} does not take patterns")
        for label in self.gazetteers:
            if label not in GAZETTEER_LABELS:
                raise RulesConfigError(f"label {label.wire!r} does not take a gazetteer")
        if sorted(self.priority, key=lambda l: l.wire) != sorted(
            EntityLabel, key=lambda l: l.wire
        ):
            raise RulesConfigError("priority must list every entity label exactly once")

    @classmethod
    def from_dict(cls, raw: dict) -> "RulesConfig":
        patterns: dict[EntityLabel, tuple[re.Pattern[str], ...]] = {}
        for name, exprs in (raw.get("patterns") or {}).items():
            label = EntityLabel.from_wire(name)
            compiled = []
            for expr in exprs:
                try:
                    compiled.append(re.compile(expr))
                except re.error as exc:
                    raise RulesConfigError(f"invalid pattern for {name!r}: {exc}") from None
            patterns[label] = tuple(compiled)
        gazetteers = {
            EntityLabel.from_wire(name): tuple(words)
            for name, words in (raw.get("gazetteers") or {}).items()
        }
        priority = DEFAULT_LABEL_PRIORITY
        if raw.get("priority"):
            priority = tuple(EntityLabel.from_wire(name) for name in raw["priority"])
        return cls(patterns=patterns, gazetteers=gazetteers, priority=priority)

    @classmethod
    def from_file(cls, path: str | Path) -> "RulesConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise RulesConfigError(f"cannot read rules config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise RulesConfigError(f"rules config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)


def _fold_word(word: str) -> str:
    """Case-fold a word and drop edge punctuation, for gazetteer comparison."""
    start, end = 0, len(word)
    while start < end and _is_edge_punctuation(word[start]):
        start += 1
    while end > start and _is_edge_punctuation(word[end - 1]):
        end -= 1
    return word[start:end].casefold()


class RuleRecognizer:
    """Regex and gazetteer matcher emitting one IO-tagged token per word.

    Recall-first: every candidate match labels all words it touches, and a
    word claimed by several labels keeps the highest-priority one. Pure and
    safe for concurrent use.
    """

    source = SpanSource.RULE
    serial = False

    def __init__(self, config: RulesConfig):
        self.config = config
        self._rank = {label: i for i, label in enumerate(config.priority)}
        # Gazetteer entries indexed by their first folded word.
        self._gazetteer_index: dict[str, list[tuple[tuple[str, ...], EntityLabel]]] = {}
        for label, entries in config.gazetteers.items():
            for entry in entries:
                folded = tuple(part.casefold() for part in entry.split())
                if folded:
                    self._gazetteer_index.setdefault(folded[0], []).append((folded, label))

    def recognize(self, window: ContextWindow) -> list[TokenLabel]:
        text = window.target.text
        words = word_ranges(text)
        candidates: list[set[EntityLabel]] = [set() for _ in words]

        for label, patterns in self.config.patterns.items():
            for pattern in patterns:
                for match in pattern.finditer(text):
                    if match.start() == match.end():
                        continue
                    for i, (ws, we) in enumerate(words):
                        if match.start() < we and ws < match.end():
                            candidates[i].add(label)

        folded = [_fold_word(text[ws:we]) for ws, we in words]
        for i, first in enumerate(folded):
            for entry, label in self._gazetteer_index.get(first, ()):
                if tuple(folded[i : i + len(entry)]) == entry:
                    for j in range(i, i + len(entry)):
                        candidates[j].add(label)

        tokens = []
        for (ws, we), labels in zip(words, candidates):
            if labels:
                best = min(labels, key=self._rank.__getitem__)
                tag = tag_for(best)
            else:
                tag = OUTSIDE_TAG
            tokens.append(TokenLabel(text=text[ws:we], start=ws, end=we, tag=tag))
        return tokens


def rule_recognizer(config: RulesConfig) -> RuleRecognizer:
    return RuleRecognizer(config)


@dataclass(frozen=True)
class ModelEndpointConfig:
    url: str
    timeout_s: float = 30.0
    headers: dict[str, str] = field(default_factory=dict)


class ModelRecognizer:
    """HTTP adapter for an external token-labeling model.

    Sends the window's three texts, receives IO-tagged tokens with character
    ranges over the target, and validates them before handing them on.
    """

    source = SpanSource.MODEL
    serial = False

    def __init__(
        self,
        config: ModelEndpointConfig,
        transport: Callable[[dict], dict] | None = None,
    ):
        self.config = config
        self._transport = transport or self._http_transport

    def _http_transport(self, payload: dict) -> dict:
        try:
            response = requests.post(
                self.config.url,
                json=payload,
                headers=self.config.headers,
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise AdapterError(f"model endpoint unreachable: {exc}") from exc
        if response.status_code != 200:
            raise AdapterError(f"model endpoint returned HTTP {response.status_code}")
        try:
            return response.json()
        except ValueError as exc:
            raise AdapterError(f"model endpoint returned invalid JSON: {exc}") from None

    def recognize(self, window: ContextWindow) -> list[TokenLabel]:
        payload = {
            "previous": window.previous.text if window.previous else None,
            "target": window.target.text,
            "next": window.next.text if window.next else None,
        }
        data = self._transport(payload)
        if not isinstance(data, dict) or not isinstance(data.get("tokens"), list):
            raise AdapterError("model response must be an object with a 'tokens' array")
        tokens = []
        for raw in data["tokens"]:
            try:
                tokens.append(
                    TokenLabel(
                        text=raw["text"], start=raw["start"], end=raw["end"], tag=raw["tag"]
                    )
                )
            except (KeyError, TypeError) as exc:
                raise AdapterError(f"malformed token object in model response: {exc}") from None
        try:
            validate_token_labels(tokens, window.target.text)
        except ValueError as exc:
            raise AdapterError(f"model response violates token invariants: {exc}") from None
        return tokens


def model_recognizer_adapter(
    endpoint: ModelEndpointConfig, transport: Callable[[dict], dict] | None = None
) -> ModelRecognizer:
    return ModelRecognizer(endpoint, transport)
