"""Instruction vocabulary and the three-token ``Prompt``."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError

VERBS = ("put", "stack", "open")
# NULL and UNKNOWN are reserved; UNKNOWN never appears in any generated dataset.
CONCEPTS = ("NULL", "UNKNOWN", "red", "green", "blue", "mug", "pot", "banana", "apple")
SPATIAL = ("NULL", "UNKNOWN", "left", "right")

NULL = 0
UNKNOWN = 1

# Observation concept one-hots cover the real concepts only.
OBJECT_CONCEPTS = CONCEPTS[2:]
N_OBJECT_CONCEPTS = len(OBJECT_CONCEPTS)

ZONE_TYPES = ("plate", "stove")

# Offsets into the single shared embedding table.
VERB_OFFSET = 0
CONCEPT_OFFSET = len(VERBS)
SPATIAL_OFFSET = len(VERBS) + len(CONCEPTS)
VOCAB_SIZE = len(VERBS) + len(CONCEPTS) + len(SPATIAL)


def concept_id(name: str) -> int:
    return CONCEPTS.index(name)


def object_concept(token: int) -> int:
    """Map a concept token to the observation one-hot index (-1 for NULL/UNKNOWN)."""
    return token - 2 if token >= 2 else -1


@dataclass(frozen=True, order=True)
class Prompt:
    verb: int
    concept: int = NULL
    spatial: int = NULL

    def __post_init__(self):
        for val, table, kind in ((self.verb, VERBS, "verb"), (self.concept, CONCEPTS, "concept"),
                                 (self.spatial, SPATIAL, "spatial")):
            if not isinstance(val, int) or not 0 <= val < len(table):
                raise ValidationError(f"{kind} token {val!r} outside vocabulary of size {len(table)}")

    @classmethod
    def make(cls, verb: str, concept: str = "NULL", spatial: str = "NULL") -> "Prompt":
        try:
            return cls(VERBS.index(verb), CONCEPTS.index(concept), SPATIAL.index(spatial))
        except ValueError as e:
            raise ValidationError(str(e)) from None

    @classmethod
    def parse(cls, text: str) -> "Prompt":
        """Parse ``verb/concept/spatial`` (missing trailing fields default to NULL)."""
        parts = [p.strip() for p in text.split("/")]
        if not 1 <= len(parts) <= 3:
            raise ValidationError(f"cannot parse prompt {text!r}")
        return cls.make(*parts)

    def token_ids(self) -> tuple[int, int, int]:
        return (VERB_OFFSET + self.verb, CONCEPT_OFFSET + self.concept, SPATIAL_OFFSET + self.spatial)

    def with_spatial(self, name: str) -> "Prompt":
        return Prompt(self.verb, self.concept, SPATIAL.index(name))

    def with_concept(self, name: str) -> "Prompt":
        return Prompt(self.verb, CONCEPTS.index(name), self.spatial)

    @property
    def key(self) -> str:
        return f"{VERBS[self.verb]}/{CONCEPTS[self.concept]}/{SPATIAL[self.spatial]}"

    def __str__(self) -> str:
        words = [VERBS[self.verb]]
        if self.concept != NULL:
            words.append(CONCEPTS[self.concept])
        if self.spatial != NULL:
            words.append(SPATIAL[self.spatial])
        return " ".join(words)
