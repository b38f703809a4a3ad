"""Dialogue corpus data model and line-delimited JSON serialization.

A corpus is a list of dialogues; a dialogue is an ordered list of chat
messages, each from a student or a tutor. Entity spans are character-offset
regions inside one message (offsets are Unicode scalar-value indices, not
bytes). Everything here is immutable value data after construction, so
dialogues can be shared freely between worker threads.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


class CorpusError(Exception):
    """Base class for corpus ingestion/serialization failures."""


class CorpusFormatError(CorpusError):
    """A record violated the wire format or a dialogue invariant.

    Carries the 1-based line number of the offending record when the
    failure came from a file.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SpeakerRole(enum.Enum):
    STUDENT = "student"
    TUTOR = "tutor"

    @property
    def wire(self) -> str:
        return self.value

    @classmethod
    def from_wire(cls, name: str) -> "SpeakerRole":
        try:
            return cls(name)
        except ValueError:
            raise CorpusFormatError(f"unknown speaker {name!r}") from None


class EntityLabel(enum.Enum):
    """The seven potential-PII labels, in canonical order."""

    NAME = "name"
    LOCATION_ADDRESS = "location_address"
    URL = "url"
    DATE_OF_BIRTH = "date_of_birth"
    PHONE_NUMBER = "phone_number"
    SCHOOL_NAME = "school_name"
    EMAIL_SOCIAL = "email_social"

    @property
    def wire(self) -> str:
        return self.value

    @classmethod
    def from_wire(cls, name: str) -> "EntityLabel":
        try:
            return cls(name)
        except ValueError:
            raise CorpusFormatError(f"unknown entity label {name!r}") from None


class SpanSource(enum.Enum):
    RULE = "rule"
    MODEL = "model"
    MANUAL = "manual"

    @property
    def wire(self) -> str:
        return self.value

    @classmethod
    def from_wire(cls, name: str) -> "SpanSource":
        try:
            return cls(name)
        except ValueError:
            raise CorpusFormatError(f"unknown span source {name!r}") from None


class TalkMoveLabel(enum.Enum):
    """Tutoring-strategy labels attached per message (pipeline inputs).

    Lives here rather than in :mod:`anonpivot.curate` because the corpus
    wire format carries these values; curate re-exports it.
    """

    PRESS_FOR_ACCURACY = "press_accuracy"
    KEEP_TOGETHER = "keep_together"
    REVOICING = "revoicing"
    RESTATING = "restating"
    PRESS_FOR_REASONING = "press_reasoning"
    GETTING_STUDENTS_TO_RELATE = "gsr"
    NONE = "none"

    @property
    def wire(self) -> str:
        return self.value

    @classmethod
    def from_wire(cls, name: str) -> "TalkMoveLabel":
        try:
            return cls(name)
        except ValueError:
            raise CorpusFormatError(f"unknown talk move {name!r}") from None


@dataclass(frozen=True, slots=True)
class Message:
    """One chat message. ``index`` is its 0-based ordinal in the dialogue."""

    index: int
    speaker: SpeakerRole
    text: str

    @property
    def is_degenerate(self) -> bool:
        """True when the message has no visible content (anonymization skips it)."""
        return not self.text.strip()


@dataclass(frozen=True, slots=True)
class Span:
    """A labeled character region ``[start, end)`` inside one message."""

    message_index: int
    start: int
    end: int
    label: EntityLabel
    source: SpanSource

    def surface(self, text: str) -> str:
        return text[self.start : self.end]


@dataclass(frozen=True, slots=True)
class Turn:
    """Maximal run of consecutive same-speaker messages, texts space-joined."""

    speaker: SpeakerRole
    message_indices: tuple[int, ...]
    text: str

    @property
    def words(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True, slots=True)
class Dialogue:
    id: str
    messages: tuple[Message, ...]
    question_id: str | None = None
    talk_moves: tuple[TalkMoveLabel, ...] | None = None
    spans: tuple[Span, ...] | None = None


def validate_dialogue(d: Dialogue) -> None:
    """Raise :class:`CorpusFormatError` on any invariant violation."""
    if not d.messages:
        raise CorpusFormatError(f"dialogue {d.id!r}: messages must be nonempty")
    for expected, msg in enumerate(d.messages):
        if msg.index != expected:
            raise CorpusFormatError(
                f"dialogue {d.id!r}: message indices must be contiguous from 0, "
                f"found {msg.index} where {expected} was expected"
            )
    if d.talk_moves is not None and len(d.talk_moves) != len(d.messages):
        raise CorpusFormatError(
            f"dialogue {d.id!r}: talk_moves length {len(d.talk_moves)} "
            f"does not match {len(d.messages)} messages"
        )
    if d.spans is not None:
        validate_spans(d, d.spans)


def validate_spans(d: Dialogue, spans: Sequence[Span]) -> None:
    """Check span offsets against message texts and per-message non-overlap."""
    by_message: dict[int, list[Span]] = {}
    for span in spans:
        if not 0 <= span.message_index < len(d.messages):
            raise CorpusFormatError(
                f"dialogue {d.id!r}: span message_index {span.message_index} out of range"
            )
        text = d.messages[span.message_index].text
        if not 0 <= span.start < span.end <= len(text):
            raise CorpusFormatError(
                f"dialogue {d.id!r}: span [{span.start}, {span.end}) invalid for "
                f"message {span.message_index} of length {len(text)}"
            )
        by_message.setdefault(span.message_index, []).append(span)
    for idx, group in by_message.items():
        group.sort(key=lambda s: s.start)
        for a, b in zip(group, group[1:]):
            if b.start < a.end:
                raise CorpusFormatError(
                    f"dialogue {d.id!r}: overlapping spans in message {idx}: "
                    f"[{a.start},{a.end}) and [{b.start},{b.end})"
                )


def merge_turns(d: Dialogue) -> list[Turn]:
    """Merge consecutive same-speaker messages into talk turns.

    Every message lands in exactly one turn and adjacent turns alternate
    speakers. Texts are joined with a single space.
    """
    turns: list[Turn] = []
    run: list[Message] = []
    for msg in d.messages:
        if run and msg.speaker is not run[-1].speaker:
            turns.append(_finish_turn(run))
            run = []
        run.append(msg)
    if run:
        turns.append(_finish_turn(run))
    return turns


def _finish_turn(run: list[Message]) -> Turn:
    return Turn(
        speaker=run[0].speaker,
        message_indices=tuple(m.index for m in run),
        text=" ".join(m.text for m in run),
    )


def dialogue_to_record(d: Dialogue) -> dict:
    record: dict = {
        "id": d.id,
        "question_id": d.question_id,
        "messages": [
            {"index": m.index, "speaker": m.speaker.wire, "text": m.text}
            for m in d.messages
        ],
    }
    if d.talk_moves is not None:
        record["talk_moves"] = [tm.wire for tm in d.talk_moves]
    if d.spans is not None:
        record["spans"] = [
            {
                "message_index": s.message_index,
                "start": s.start,
                "end": s.end,
                "label": s.label.wire,
                "source": s.source.wire,
            }
            for s in d.spans
        ]
    return record


def dialogue_from_record(record: dict) -> Dialogue:
    if not isinstance(record, dict):
        raise CorpusFormatError("record must be a JSON object")
    try:
        dialogue_id = record["id"]
        raw_messages = record["messages"]
    except KeyError as missing:
        raise CorpusFormatError(f"record missing field {missing}") from None
    if not isinstance(dialogue_id, str):
        raise CorpusFormatError("field 'id' must be a string")
    question_id = record.get("question_id")
    if question_id is not None and not isinstance(question_id, str):
        raise CorpusFormatError("field 'question_id' must be a string or null")
    if not isinstance(raw_messages, list):
        raise CorpusFormatError("field 'messages' must be an array")

    messages = []
    for raw in raw_messages:
        try:
            msg = Message(
                index=raw["index"],
                speaker=SpeakerRole.from_wire(raw["speaker"]),
                text=raw["text"],
            )
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError(f"malformed message object: {exc}") from None
        if not isinstance(msg.index, int) or not isinstance(msg.text, str):
            raise CorpusFormatError("message 'index' must be int and 'text' must be string")
        messages.append(msg)

    talk_moves = None
    if record.get("talk_moves") is not None:
        talk_moves = tuple(TalkMoveLabel.from_wire(v) for v in record["talk_moves"])

    spans = None
    if record.get("spans") is not None:
        spans = []
        for raw in record["spans"]:
            try:
                spans.append(
                    Span(
                        message_index=raw["message_index"],
                        start=raw["start"],
                        end=raw["end"],
                        label=EntityLabel.from_wire(raw["label"]),
                        source=SpanSource.from_wire(raw["source"]),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise CorpusFormatError(f"malformed span object: {exc}") from None
        spans = tuple(spans)

    dialogue = Dialogue(
        id=dialogue_id,
        messages=tuple(messages),
        question_id=question_id,
        talk_moves=talk_moves,
        spans=spans,
    )
    validate_dialogue(dialogue)
    return dialogue


def load_corpus(path: str | Path) -> list[Dialogue]:
    """Read a line-delimited corpus file (UTF-8, one dialogue per line).

    Malformed records raise :class:`CorpusFormatError` naming the line.
    An empty file yields an empty corpus.
    """
    path = Path(path)
    dialogues: list[Dialogue] = []
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"invalid JSON: {exc}", line=lineno) from None
        try:
            dialogues.append(dialogue_from_record(record))
        except CorpusFormatError as exc:
            raise CorpusFormatError(str(exc), line=lineno) from None
    return dialogues


def save_corpus(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    """Write dialogues as line-delimited JSON; loading the file back is identity."""
    path = Path(path)
    lines = [json.dumps(dialogue_to_record(d), ensure_ascii=False) for d in dialogues]
    try:
        with path.open("w", encoding="utf-8") as handle:
            for line in lines:
                handle.write(line)
                handle.write("\n")
    except OSError as exc:
        raise CorpusError(f"cannot write corpus file {path}: {exc}") from exc
