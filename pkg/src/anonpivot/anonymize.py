"""Consistent surrogate replacement for labeled entity spans.

Labeled spans are grouped by (label, normalized surface) so every mention of
an entity receives one surrogate across the whole dialogue. A chat model is
asked for the mapping in a single request conditioned on the full transcript;
replies are checked for measurable qualities (nonempty, unrelated to the
original, label-appropriate shape) and violations are fed back verbatim for
another round. Verifiable labels (URLs, emails/socials) skip the model and
are obfuscated with fixed placeholders. Replacement itself is whole-span
substitution applied right-to-left so character offsets never shift under
earlier spans.

The shape checks behind ``WrongLabelFormat`` (phone digit count, parseable
date) are pragmatic extrapolations of "measurable qualities", not a fixed
contract; tune them per deployment.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Dialogue, EntityLabel, Span
from .llm_client import DEFAULT_MODEL_NAME, ChatMessage, ChatRequest

OBFUSCATION_PLACEHOLDERS = {
    EntityLabel.URL: "[URL]",
    EntityLabel.EMAIL_SOCIAL: "[EMAIL_SOCIAL]",
}

DEFAULT_SIMILARITY_THRESHOLD = 0.5

DEFAULT_GUIDANCE = {
    "name": "Preserve the person's gender and ethnic background; keep nicknames informal.",
    "location_address": (
        "Replace with a different real place of the same granularity "
        "(city for city, street for street) in the same country."
    ),
    "date_of_birth": "Replace with a different plausible date, keeping the original format.",
    "phone_number": "Replace with a different plausibly formatted number that is not dialable.",
    "school_name": "Replace with a plausible fictional school of the same kind.",
}

SYSTEM_PROMPT = (
    "You replace sensitive details in tutoring conversations with realistic "
    "surrogates. Follow the instructions exactly and answer only in the "
    "requested JSON shape."
)

# Accepted shapes for date-of-birth surrogates (ordinal suffixes stripped first).
_DATE_FORMATS = (
    "%Y-%m-%d",
    "%d/%m/%Y",
    "%m/%d/%Y",
    "%d/%m/%y",
    "%d-%m-%Y",
    "%Y/%m/%d",
    "%d %B %Y",
    "%d %b %Y",
    "%B %d %Y",
    "%B %d, %Y",
)
_ORDINAL_RE = re.compile(r"\b(\d{1,2})(st|nd|rd|th)\b", re.IGNORECASE)


class AnonymizationError(Exception):
    """Base class for anonymization-stage failures."""


class MappingResponseKind(enum.Enum):
    UNPARSEABLE = "unparseable"
    MISSING_KEY = "missing_key"
    EXTRA_KEY = "extra_key"


class MappingResponseError(AnonymizationError):
    """The model reply could not be turned into the requested mapping."""

    def __init__(self, kind: MappingResponseKind, detail: str):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}: {detail}")


class MappingExhaustedError(AnonymizationError):
    """Reprompting hit the round cap without a violation-free mapping."""

    def __init__(self, dialogue_id: str, rounds: int, problems: Sequence[object]):
        self.dialogue_id = dialogue_id
        self.rounds = rounds
        self.problems = list(problems)
        summary = "; ".join(str(p) for p in self.problems) or "no reply"
        super().__init__(
            f"dialogue {dialogue_id!r}: no acceptable mapping after {rounds} rounds ({summary})"
        )


class ViolationKind(enum.Enum):
    TOO_SIMILAR = "too_similar"
    EMPTY = "empty"
    CONTAINS_ORIGINAL = "contains_original"
    WRONG_LABEL_FORMAT = "wrong_label_format"


@dataclass(frozen=True, slots=True)
class QualityViolation:
    label: EntityLabel
    original: str
    surrogate: str
    kind: ViolationKind
    detail: str

    def __str__(self) -> str:
        return f"{self.original} → {self.surrogate}: {self.kind.value}: {self.detail}"


@dataclass(frozen=True, slots=True)
class EntityGroup:
    """All occurrences of one (label, normalized surface) entity."""

    label: EntityLabel
    canonical: str
    occurrences: tuple[Span, ...]


@dataclass(frozen=True, slots=True)
class MappingEntry:
    label: EntityLabel
    original: str
    surrogate: str


@dataclass(frozen=True)
class SurrogateMapping:
    dialogue_id: str
    entries: tuple[MappingEntry, ...]

    def lookup(self) -> dict[tuple[EntityLabel, str], str]:
        return {(e.label, e.original): e.surrogate for e in self.entries}


@dataclass(frozen=True, slots=True)
class SkippedSpan:
    span: Span
    reason: str


@dataclass(frozen=True, slots=True)
class AppliedReplacement:
    """One substitution, keyed by the original span's coordinates."""

    message_index: int
    start: int
    end: int
    label: EntityLabel
    surrogate: str


@dataclass(frozen=True)
class AnonymizationReport:
    dialogue_id: str
    replacements: dict[str, int]
    reprompt_rounds: int
    obfuscated: int
    skipped: tuple[SkippedSpan, ...] = ()
    applied: tuple[AppliedReplacement, ...] = ()
    risks: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "replacements": dict(sorted(self.replacements.items())),
            "reprompt_rounds": self.reprompt_rounds,
            "obfuscated": self.obfuscated,
            "skipped": [
                {
                    "message_index": s.span.message_index,
                    "start": s.span.start,
                    "end": s.span.end,
                    "label": s.span.label.wire,
                    "reason": s.reason,
                }
                for s in self.skipped
            ],
            "applied": [
                {
                    "message_index": a.message_index,
                    "start": a.start,
                    "end": a.end,
                    "label": a.label.wire,
                    "surrogate": a.surrogate,
                }
                for a in self.applied
            ],
            "risks": list(self.risks),
        }


def normalize_surface(surface: str) -> str:
    """Grouping key normalization: case-fold and collapse whitespace runs."""
    return " ".join(surface.casefold().split())


def group_entities(d: Dialogue, spans: Sequence[Span]) -> list[EntityGroup]:
    """Group trimmed spans by (label, normalized surface), in first-occurrence order."""
    ordered = sorted(spans, key=lambda s: (s.message_index, s.start))
    groups: dict[tuple[EntityLabel, str], list[Span]] = {}
    for span in ordered:
        surface = d.messages[span.message_index].text[span.start : span.end]
        key = (span.label, normalize_surface(surface))
        groups.setdefault(key, []).append(span)
    return [
        EntityGroup(label=label, canonical=canonical, occurrences=tuple(occurrences))
        for (label, canonical), occurrences in groups.items()
    ]


def mappable_groups(groups: Iterable[EntityGroup]) -> list[EntityGroup]:
    """Groups that need a model-generated surrogate (obfuscated labels excluded)."""
    return [g for g in groups if g.label not in OBFUSCATION_PLACEHOLDERS]


def requested_items(groups: Iterable[EntityGroup]) -> dict[str, list[str]]:
    """Label wire name to ordered originals, exactly as the prompt requests them."""
    items: dict[str, list[str]] = {}
    for label in EntityLabel:
        originals = [g.canonical for g in groups if g.label is label]
        if originals:
            items[label.wire] = originals
    return items


def build_mapping_prompt(
    d: Dialogue,
    groups: Sequence[EntityGroup],
    instructions: Mapping[str, str] | None = None,
) -> str:
    """Compose the deterministic mapping request for one dialogue.

    Contains the full transcript in order, the originals per label, the
    per-label preservation guidance, and the required reply schema.
    """
    wanted = mappable_groups(groups)
    if not wanted:
        raise ValueError("no groups need a mapping (all labels are obfuscated)")
    guidance = dict(DEFAULT_GUIDANCE)
    if instructions:
        guidance.update(instructions)
    items = requested_items(wanted)

    lines = [
        "Anonymize the sensitive items found in this conversation by choosing",
        "realistic replacements that keep the dialogue coherent.",
        "",
        "Conversation:",
    ]
    for msg in d.messages:
        lines.append(f"[{msg.index}] {msg.speaker.wire}: {msg.text}")
    lines += [
        "",
        "Items to replace (JSON, grouped by label):",
        "```json",
        json.dumps(items, ensure_ascii=False, indent=2),
        "```",
        "",
        "Guidance per label:",
    ]
    for wire in items:
        if wire in guidance:
            lines.append(f"- {wire}: {guidance[wire]}")
    lines += [
        "",
        "Reply with one JSON object inside a ```json fenced block. For every",
        "label above, map each original (exactly as written) to its replacement",
        "string. Use the same replacement wherever one original repeats, and do",
        "not add, drop, or rename any key.",
    ]
    return "\n".join(lines)


def _extract_json_object(raw: str) -> dict:
    candidates = [m.group(1) for m in re.finditer(r"```(?:json)?\s*(.*?)```", raw, re.DOTALL)]
    candidates.append(raw)
    decoder = json.JSONDecoder()
    for candidate in candidates:
        start = candidate.find("{")
        while start != -1:
            try:
                obj, _ = decoder.raw_decode(candidate[start:])
            except json.JSONDecodeError:
                start = candidate.find("{", start + 1)
                continue
            if isinstance(obj, dict):
                return obj
            start = candidate.find("{", start + 1)
    raise MappingResponseError(MappingResponseKind.UNPARSEABLE, "no JSON object found in reply")


def parse_mapping_response(
    raw: str, groups: Sequence[EntityGroup], dialogue_id: str = ""
) -> SurrogateMapping:
    """Extract the structured mapping and verify it covers exactly the request."""
    wanted = mappable_groups(groups)
    obj = _extract_json_object(raw)
    expected = requested_items(wanted)

    for wire, mapped in obj.items():
        if wire not in expected:
            raise MappingResponseError(
                MappingResponseKind.EXTRA_KEY, f"unexpected label {wire!r} in reply"
            )
        if not isinstance(mapped, dict):
            raise MappingResponseError(
                MappingResponseKind.UNPARSEABLE, f"value for {wire!r} is not an object"
            )
        for original in mapped:
            if original not in expected[wire]:
                raise MappingResponseError(
                    MappingResponseKind.EXTRA_KEY,
                    f"unexpected original {original!r} under {wire!r}",
                )

    entries = []
    for group in wanted:
        mapped = obj.get(group.label.wire)
        if mapped is None:
            raise MappingResponseError(
                MappingResponseKind.MISSING_KEY, f"label {group.label.wire!r} missing from reply"
            )
        if group.canonical not in mapped:
            raise MappingResponseError(
                MappingResponseKind.MISSING_KEY,
                f"original {group.canonical!r} missing under {group.label.wire!r}",
            )
        surrogate = mapped[group.canonical]
        if not isinstance(surrogate, str):
            raise MappingResponseError(
                MappingResponseKind.UNPARSEABLE,
                f"replacement for {group.canonical!r} is not a string",
            )
        entries.append(
            MappingEntry(label=group.label, original=group.canonical, surrogate=surrogate)
        )
    return SurrogateMapping(dialogue_id=dialogue_id, entries=tuple(entries))


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance, plain dynamic programming."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,
                    current[j - 1] + 1,
                    previous[j - 1] + (ca != cb),
                )
            )
        previous = current
    return previous[-1]


def surface_similarity(a: str, b: str) -> float:
    """Normalized edit-distance similarity in [0, 1]; 1 means identical."""
    if not a and not b:
        return 1.0
    return 1.0 - edit_distance(a, b) / max(len(a), len(b))


def _parses_as_date(candidate: str) -> bool:
    cleaned = _ORDINAL_RE.sub(r"\1", candidate.strip())
    cleaned = re.sub(r"\s+", " ", cleaned)
    for fmt in _DATE_FORMATS:
        try:
            datetime.strptime(cleaned, fmt)
            return True
        except ValueError:
            continue
    return False


def _whole_word_present(needle: str, haystack: str) -> bool:
    return re.search(rf"(?<!\w){re.escape(needle)}(?!\w)", haystack) is not None


def check_quality(
    mapping: SurrogateMapping, theta_sim: float = DEFAULT_SIMILARITY_THRESHOLD
) -> list[QualityViolation]:
    """Flag entries whose surrogate fails a measurable quality.

    Checks, per entry: blank surrogate; original contained in surrogate or
    vice versa (also any other entry's original reappearing whole-word in the
    surrogate, which would plant one original inside another replacement);
    normalized edit similarity above ``theta_sim``; label-specific shape
    (phone surrogates need 7+ digits, birth dates must parse).
    """
    violations: list[QualityViolation] = []
    all_originals = [e.original for e in mapping.entries]
    for entry in mapping.entries:
        original = entry.original
        surrogate = entry.surrogate
        flag = lambda kind, detail: violations.append(  # noqa: E731
            QualityViolation(entry.label, original, surrogate, kind, detail)
        )
        if not surrogate.strip():
            flag(ViolationKind.EMPTY, "replacement is empty")
            continue
        folded = surrogate.casefold()
        if original in folded or folded in original:
            flag(
                ViolationKind.CONTAINS_ORIGINAL,
                "replacement contains the original (or the reverse); pick something unrelated",
            )
        else:
            for other in all_originals:
                if other != original and _whole_word_present(other, folded):
                    flag(
                        ViolationKind.CONTAINS_ORIGINAL,
                        f"replacement reuses another item being replaced ({other!r})",
                    )
                    break
        similarity = surface_similarity(original, folded)
        if similarity > theta_sim:
            flag(
                ViolationKind.TOO_SIMILAR,
                f"replacement is too close to the original "
                f"(similarity {similarity:.2f} > {theta_sim:.2f})",
            )
        if entry.label is EntityLabel.PHONE_NUMBER:
            digits = sum(ch.isdigit() for ch in surrogate)
            if digits < 7:
                flag(
                    ViolationKind.WRONG_LABEL_FORMAT,
                    f"phone replacement needs at least 7 digits, found {digits}",
                )
        elif entry.label is EntityLabel.DATE_OF_BIRTH:
            if not _parses_as_date(surrogate):
                flag(
                    ViolationKind.WRONG_LABEL_FORMAT,
                    "date replacement must be a parseable calendar date",
                )
    return violations


def feedback_message(problems: Sequence[QualityViolation | MappingResponseError]) -> str:
    lines = ["Some replacements need to change:"]
    for problem in problems:
        if isinstance(problem, MappingResponseError):
            lines = [f"Your reply could not be used ({problem})."]
            break
        lines.append(f"- {problem}")
    lines.append("Reply again with the complete corrected JSON mapping in a ```json block.")
    return "\n".join(lines)


def reprompt_with_feedback(
    client,
    prompt: str,
    groups: Sequence[EntityGroup],
    max_rounds: int = 3,
    theta_sim: float = DEFAULT_SIMILARITY_THRESHOLD,
    dialogue_id: str = "",
    model_name: str = DEFAULT_MODEL_NAME,
) -> tuple[SurrogateMapping, int]:
    """Request a mapping, feeding violations back until clean or out of rounds.

    Returns the first violation-free mapping and the number of requests made.
    Raises :class:`MappingExhaustedError` carrying the final round's problems.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    messages = [
        ChatMessage(role="system", content=SYSTEM_PROMPT),
        ChatMessage(role="user", content=prompt),
    ]
    problems: list[QualityViolation | MappingResponseError] = []
    for round_number in range(1, max_rounds + 1):
        raw = client.send_chat(
            ChatRequest(messages=tuple(messages), model_name=model_name, temperature=0.0)
        )
        try:
            mapping = parse_mapping_response(raw, groups, dialogue_id=dialogue_id)
        except MappingResponseError as exc:
            problems = [exc]
        else:
            violations = check_quality(mapping, theta_sim)
            if not violations:
                return mapping, round_number
            problems = list(violations)
        messages.append(ChatMessage(role="assistant", content=raw))
        messages.append(ChatMessage(role="user", content=feedback_message(problems)))
    raise MappingExhaustedError(dialogue_id, max_rounds, problems)


def obfuscate_verifiable(span: Span) -> str:
    """Fixed placeholder for labels whose content is machine-verifiable."""
    try:
        return OBFUSCATION_PLACEHOLDERS[span.label]
    except KeyError:
        raise ValueError(f"label {span.label.wire!r} is not obfuscated") from None


def superstring_risks(groups: Sequence[EntityGroup]) -> list[str]:
    """Same-label groups whose canonical contains another group's canonical.

    Usually possessives ("john's" next to "john"); they anonymize
    independently, which is worth surfacing for review.
    """
    risks = []
    by_label: dict[EntityLabel, list[str]] = {}
    for group in groups:
        by_label.setdefault(group.label, []).append(group.canonical)
    for label, canonicals in by_label.items():
        for a in canonicals:
            for b in canonicals:
                if a != b and b in a:
                    risks.append(f"{label.wire}: {a!r} contains {b!r}")
    return risks


def apply_mapping(
    d: Dialogue,
    spans: Sequence[Span],
    mapping: SurrogateMapping,
    reprompt_rounds: int = 0,
) -> tuple[Dialogue, AnonymizationReport]:
    """Substitute every span with its group surrogate or obfuscation placeholder.

    Replacements run right-to-left within each message so earlier offsets
    stay valid. Characters outside spans are untouched; a span whose group
    has no mapping entry is an error.
    """
    lookup = mapping.lookup()
    by_message: dict[int, list[Span]] = {}
    for span in spans:
        by_message.setdefault(span.message_index, []).append(span)

    replacements: dict[str, int] = {}
    applied: list[AppliedReplacement] = []
    skipped: list[SkippedSpan] = []
    obfuscated = 0
    new_messages = list(d.messages)

    for index, message_spans in sorted(by_message.items()):
        message = d.messages[index]
        message_spans.sort(key=lambda s: s.start)
        for a, b in zip(message_spans, message_spans[1:]):
            if b.start < a.end:
                raise AnonymizationError(
                    f"dialogue {d.id!r}: overlapping spans in message {index}"
                )
        if message.is_degenerate:
            skipped.extend(SkippedSpan(s, "degenerate message") for s in message_spans)
            continue
        text = message.text
        for span in reversed(message_spans):
            if span.label in OBFUSCATION_PLACEHOLDERS:
                surrogate = OBFUSCATION_PLACEHOLDERS[span.label]
                obfuscated += 1
            else:
                canonical = normalize_surface(text[span.start : span.end])
                surrogate = lookup.get((span.label, canonical))
                if surrogate is None:
                    raise AnonymizationError(
                        f"dialogue {d.id!r}: no mapping entry for "
                        f"({span.label.wire}, {canonical!r})"
                    )
            text = text[: span.start] + surrogate + text[span.end :]
            replacements[span.label.wire] = replacements.get(span.label.wire, 0) + 1
            applied.append(
                AppliedReplacement(index, span.start, span.end, span.label, surrogate)
            )
        new_messages[index] = replace(message, text=text)

    report = AnonymizationReport(
        dialogue_id=d.id,
        replacements=replacements,
        reprompt_rounds=reprompt_rounds,
        obfuscated=obfuscated,
        skipped=tuple(skipped),
        applied=tuple(applied),
        risks=tuple(superstring_risks(group_entities(d, spans))),
    )
    anonymized = replace(d, messages=tuple(new_messages), spans=None)
    return anonymized, report


def anonymize_dialogue(
    d: Dialogue,
    spans: Sequence[Span],
    client,
    instructions: Mapping[str, str] | None = None,
    theta_sim: float = DEFAULT_SIMILARITY_THRESHOLD,
    max_rounds: int = 3,
    model_name: str = DEFAULT_MODEL_NAME,
) -> tuple[Dialogue, SurrogateMapping, AnonymizationReport]:
    """Full anonymization of one dialogue: group, map, verify, substitute.

    Dialogues with only obfuscated labels (or no spans) never hit the model.
    """
    groups = group_entities(d, spans)
    if mappable_groups(groups):
        prompt = build_mapping_prompt(d, groups, instructions)
        mapping, rounds = reprompt_with_feedback(
            client,
            prompt,
            groups,
            max_rounds=max_rounds,
            theta_sim=theta_sim,
            dialogue_id=d.id,
            model_name=model_name,
        )
    else:
        mapping, rounds = SurrogateMapping(dialogue_id=d.id, entries=()), 0
    anonymized, report = apply_mapping(d, spans, mapping, reprompt_rounds=rounds)
    return anonymized, mapping, report


def load_guidance(path: str | Path) -> dict[str, str]:
    """Read a per-label guidance file: ``label = sentence`` lines, # comments."""
    guidance: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise AnonymizationError(f"guidance line {lineno} is not 'label = sentence'")
        key, _, value = stripped.partition("=")
        label = EntityLabel.from_wire(key.strip())
        guidance[label.wire] = value.strip()
    return guidance
