"""Prompt construction for the four strategies and response parsing."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .errors import ExemplarCountMismatch, ExemplarLeak, InsufficientPool
from .segments import ATTENTIVE, CLASS_NAMES, INATTENTIVE

TEMPLATE_VERSION = "v1"

DIRECT = "direct"
HEURISTIC_COT = "heuristic_cot"
FEW_SHOT = "few_shot"
BLIND_SIMILARITY = "blind_similarity"
_KINDS = (DIRECT, HEURISTIC_COT, FEW_SHOT, BLIND_SIMILARITY)
STANDARD_K = (1, 5)

# must never appear in anonymised (blind) prompts, case-insensitively
FORBIDDEN_BLIND_TOKENS = ("attentive", "inattentive", "attention", "engaged", "disengaged", "mind-wandering")

COT_STEPS = (
    "1. Work out which on-screen element (slide text, formula, diagram or speaker) carries the main idea "
    "during this excerpt.",
    "2. Rate on a 0-100 scale how closely the red gaze marker stays on that element; this is the alignment value.",
    "3. Using that alignment value, decide whether the student was Attentive or Inattentive.",
)


@dataclass(frozen=True)
class StrategyKind:
    kind: str
    k: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind in (FEW_SHOT, BLIND_SIMILARITY):
            if self.k is None or self.k < 1:
                raise ValueError(f"{self.kind} needs a positive exemplar count k")
        elif self.k is not None:
            raise ValueError(f"{self.kind} takes no exemplars")

    @property
    def needs_exemplars(self) -> bool:
        return self.k is not None

    @property
    def is_blind(self) -> bool:
        return self.kind == BLIND_SIMILARITY

    @property
    def is_standard_config(self) -> bool:
        return self.k is None or self.k in STANDARD_K

    @property
    def name(self) -> str:
        return self.kind if self.k is None else f"{self.kind}_{self.k}"

    @classmethod
    def parse(cls, text: str) -> "StrategyKind":
        """Accepts ``direct``, ``heuristic_cot``, ``few_shot:5``, ``blind_similarity_1`` ..."""
        t = text.strip().lower().replace("-", "_")
        m = re.fullmatch(r"(few_shot|blind_similarity)[_:](\d+)", t)
        if m:
            return cls(m.group(1), int(m.group(2)))
        return cls(t)


def Direct() -> StrategyKind:
    return StrategyKind(DIRECT)


def HeuristicCoT() -> StrategyKind:
    return StrategyKind(HEURISTIC_COT)


def FewShot(k: int) -> StrategyKind:
    return StrategyKind(FEW_SHOT, k)


def BlindSimilarity(k: int) -> StrategyKind:
    return StrategyKind(BLIND_SIMILARITY, k)


@dataclass(frozen=True)
class Exemplar:
    segment_ref: str
    clip_ref: str
    true_class: int
    participant_id: str = ""


@dataclass(frozen=True)
class PromptBundle:
    strategy: StrategyKind
    system_text: str
    user_text: str
    media: tuple[str, ...]
    blind_mapping: Optional[Mapping[str, int]]
    response_schema_hint: str
    segment_id: str = ""
    template_version: str = TEMPLATE_VERSION

    def all_text(self) -> str:
        return "\n".join((self.system_text, self.user_text, self.response_schema_hint))


# --- templates -------------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{(steps|exemplar_block|schema_hint)\}")


def load_template(name: str, template_dir: Optional[Path] = None) -> str:
    if template_dir is not None:
        return (Path(template_dir) / f"{name}.txt").read_text(encoding="utf-8")
    return resources.files("gazeprompt").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def fill_template(template: str, **values: str) -> str:
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), template).strip() + "\n"


def schema_hint(strategy: StrategyKind) -> str:
    if strategy.is_blind:
        choice = "A or B"
    else:
        choice = "Attentive or Inattentive"
    lines = [
        "End your answer with a block in exactly this format:",
        f"CLASSIFICATION: <{choice}>",
    ]
    if strategy.kind == HEURISTIC_COT:
        lines.append("ALIGNMENT: <integer from 0 to 100>")
    lines += [
        "JUSTIFICATION: <one or two sentences explaining the decision>",
        "EVIDENCE:",
        "- <specific visual observation>",
        "- <specific visual observation>",
    ]
    return "\n".join(lines)


def blind_mapping_for_seed(seed: int) -> dict[str, int]:
    """Seeded coin flip deciding which class is presented as "A"."""
    if random.Random(seed).random() < 0.5:
        return {"A": ATTENTIVE, "B": INATTENTIVE}
    return {"A": INATTENTIVE, "B": ATTENTIVE}


def _exemplar_block(exemplars: Sequence[Exemplar], mapping: Optional[Mapping[str, int]]) -> str:
    lines = []
    if mapping is not None:
        letter = {cls: f"Class {key}" for key, cls in mapping.items()}
    for i, ex in enumerate(exemplars, start=1):
        if mapping is None:
            lines.append(f"Video {i}: example of an {CLASS_NAMES[ex.true_class]} student.")
        else:
            lines.append(f"Video {i}: example of {letter[ex.true_class]}.")
    lines.append(f"Video {len(exemplars) + 1}: target video to classify.")
    return "\n".join(lines)


def build_prompt(
    strategy: StrategyKind,
    target_clip: str,
    exemplars: Sequence[Exemplar] = (),
    blind_seed: int = 0,
    *,
    segment_id: str = "",
    target_participant: Optional[str] = None,
    exclude_same_participant: bool = True,
    template_dir: Optional[Path] = None,
) -> PromptBundle:
    """Assemble the text and media list sent to the model for one target clip."""
    exemplars = list(exemplars)
    if strategy.needs_exemplars:
        for cls in (INATTENTIVE, ATTENTIVE):
            n = sum(1 for e in exemplars if e.true_class == cls)
            if n != strategy.k:
                raise ExemplarCountMismatch(f"{strategy.name}: expected {strategy.k} exemplars of class {cls}, got {n}")
        if len(exemplars) != 2 * strategy.k:
            raise ExemplarCountMismatch(f"{strategy.name}: unexpected exemplar labels")
    elif exemplars:
        raise ExemplarCountMismatch(f"{strategy.name} takes no exemplars, got {len(exemplars)}")

    for e in exemplars:
        if segment_id and e.segment_ref == segment_id:
            raise ExemplarLeak(f"target segment {segment_id!r} used as its own exemplar")
        if exclude_same_participant and target_participant is not None and e.participant_id == target_participant:
            raise ExemplarLeak(f"exemplar {e.segment_ref!r} shares participant {target_participant!r} with the target")

    mapping = blind_mapping_for_seed(blind_seed) if strategy.is_blind else None
    hint = schema_hint(strategy)
    values = {"schema_hint": hint}
    if strategy.kind == HEURISTIC_COT:
        values["steps"] = "\n".join(COT_STEPS)
    if strategy.needs_exemplars:
        values["exemplar_block"] = _exemplar_block(exemplars, mapping)

    system = load_template("system_blind" if strategy.is_blind else "system", template_dir).strip()
    user = fill_template(load_template(strategy.kind, template_dir), **values)
    return PromptBundle(
        strategy=strategy,
        system_text=system,
        user_text=user,
        media=tuple([e.clip_ref for e in exemplars] + [target_clip]),
        blind_mapping=mapping,
        response_schema_hint=hint,
        segment_id=segment_id,
    )


def contains_forbidden_token(text: str) -> bool:
    low = text.lower()
    return any(tok in low for tok in FORBIDDEN_BLIND_TOKENS)


def select_exemplars(
    pool: Sequence[Exemplar],
    k: int,
    seed: int,
    excluded_participant: Optional[str] = None,
) -> list[Exemplar]:
    """Draw ``k`` exemplars per class uniformly at random, reproducibly."""
    candidates = sorted(
        (e for e in pool if excluded_participant is None or e.participant_id != excluded_participant),
        key=lambda e: e.segment_ref,
    )
    rng = random.Random(seed)
    chosen: list[Exemplar] = []
    for cls in (INATTENTIVE, ATTENTIVE):
        of_class = [e for e in candidates if e.true_class == cls]
        if len(of_class) < k:
            raise InsufficientPool(cls)
        chosen.extend(rng.sample(of_class, k))
    rng.shuffle(chosen)
    return chosen


# --- responses ---------------------------------------------------------------------

PARSED = "parsed"
ABSTAINED = "abstained"


@dataclass(frozen=True)
class Prediction:
    segment_id: str
    label: int
    alignment_score: Optional[int] = None
    justification: Optional[str] = None
    evidence: tuple[str, ...] = ()
    outcome: str = PARSED
    strategy: str = ""
    raw_text: str = ""

    def to_json(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "label": self.label,
            "alignment_score": self.alignment_score,
            "justification": self.justification,
            "evidence": list(self.evidence),
            "outcome": self.outcome,
            "strategy": self.strategy,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Prediction":
        return cls(
            segment_id=d["segment_id"],
            label=int(d["label"]),
            alignment_score=d.get("alignment_score"),
            justification=d.get("justification"),
            evidence=tuple(d.get("evidence") or ()),
            outcome=d.get("outcome", PARSED),
            strategy=d.get("strategy", ""),
            raw_text=d.get("raw_text", ""),
        )


_FIELD = re.compile(
    r"^[ \t*#>_]*(CLASSIFICATION|ALIGNMENT|JUSTIFICATION|EVIDENCE)[ \t*_]*:[ \t*_]*(.*)$",
    re.IGNORECASE | re.MULTILINE,
)
_CLASS_WORD = re.compile(r"\b(inattentive|attentive)\b", re.IGNORECASE)
_BLIND_VALUE = re.compile(r"^\W*(?:class\s*)?([ab])\b", re.IGNORECASE)
_BLIND_SCAN = re.compile(r"\bclass\s+([ab])\b", re.IGNORECASE)
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def _sections(raw: str) -> dict[str, str]:
    matches = list(_FIELD.finditer(raw))
    out: dict[str, str] = {}
    for i, m in enumerate(matches):
        key = m.group(1).upper()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        body = m.group(2) + raw[m.end() : end]
        # first occurrence wins; models sometimes echo the template afterwards
        out.setdefault(key, body.strip())
    return out


def _word_class(word: str) -> int:
    return INATTENTIVE if word.lower() == "inattentive" else ATTENTIVE


def _decode_class(value: str, blind_mapping: Optional[Mapping[str, int]]) -> Optional[int]:
    if blind_mapping is not None:
        m = _BLIND_VALUE.match(value)
        return blind_mapping.get(m.group(1).upper()) if m else None
    m = _CLASS_WORD.search(value)
    if m:
        return _word_class(m.group(1))
    if value.strip() in ("0", "1"):
        return int(value.strip())
    return None


def _evidence_items(body: str) -> tuple[str, ...]:
    items = []
    for line in body.splitlines():
        text = _BULLET.sub("", line).strip().strip("*").strip()
        if text:
            items.append(text)
    return tuple(items)


def parse_response(
    raw: str,
    strategy: StrategyKind,
    blind_mapping: Optional[Mapping[str, int]] = None,
    *,
    segment_id: str = "",
    fallback_class: int = ATTENTIVE,
) -> Prediction:
    """Turn model output into a :class:`Prediction`; never raises.

    The structured block is tried first. Failing that, the last class keyword
    in the free text decides (``Class A``/``Class B`` under a blind mapping).
    Otherwise the prediction abstains with ``fallback_class``.
    """
    if strategy.is_blind and blind_mapping is None:
        raise ValueError("blind strategy requires the bundle's blind_mapping")
    mapping = blind_mapping if strategy.is_blind else None
    sections = _sections(raw)

    label = None
    if "CLASSIFICATION" in sections:
        first_line = sections["CLASSIFICATION"].splitlines()[0] if sections["CLASSIFICATION"] else ""
        label = _decode_class(first_line, mapping)

    justification = sections.get("JUSTIFICATION") or None
    evidence = _evidence_items(sections.get("EVIDENCE", ""))
    alignment = None
    if strategy.kind == HEURISTIC_COT and "ALIGNMENT" in sections:
        m = re.search(r"\d{1,3}", sections["ALIGNMENT"])
        if m and 0 <= int(m.group(0)) <= 100:
            alignment = int(m.group(0))

    if label is None:
        if mapping is not None:
            hits = _BLIND_SCAN.findall(raw)
            if hits:
                label = mapping.get(hits[-1].upper())
        else:
            hits = _CLASS_WORD.findall(raw)
            if hits:
                label = _word_class(hits[-1])
        if label is not None and justification is None:
            justification = raw.strip() or None

    if label is None:
        return Prediction(
            segment_id=segment_id,
            label=fallback_class,
            alignment_score=alignment,
            justification=justification,
            evidence=evidence,
            outcome=ABSTAINED,
            strategy=strategy.name,
            raw_text=raw,
        )
    return Prediction(
        segment_id=segment_id,
        label=label,
        alignment_score=alignment,
        justification=justification,
        evidence=evidence,
        outcome=PARSED,
        strategy=strategy.name,
        raw_text=raw,
    )


def render_response(
    label: int,
    strategy: StrategyKind,
    blind_mapping: Optional[Mapping[str, int]] = None,
    *,
    alignment_score: Optional[int] = None,
    justification: str = "",
    evidence: Sequence[str] = (),
) -> str:
    """Schema-conformant answer text, as a well-behaved model would produce it."""
    if strategy.is_blind:
        if blind_mapping is None:
            raise ValueError("blind strategy requires a blind mapping")
        value = next(k for k, v in blind_mapping.items() if v == label)
    else:
        value = CLASS_NAMES[label]
    lines = [f"CLASSIFICATION: {value}"]
    if strategy.kind == HEURISTIC_COT:
        lines.append(f"ALIGNMENT: {alignment_score if alignment_score is not None else 50}")
    lines.append(f"JUSTIFICATION: {justification}")
    lines.append("EVIDENCE:")
    lines += [f"- {e}" for e in evidence]
    return "\n".join(lines) + "\n"
