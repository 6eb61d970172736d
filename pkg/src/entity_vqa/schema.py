"""Closed vocabularies shared across the dataset, knowledge and evaluation modules."""
from enum import Enum
from typing import Tuple


CATEGORIES: Tuple[str, ...] = (
    'landmark', 'painting', 'sculpture', 'food', 'fruit', 'vegetable',
    'mammal', 'amphibian', 'insect', 'fish', 'bird', 'reptile',
    'celebrity', 'instrument', 'plant', 'electronics', 'tool',
    'transportation', 'sport', 'book', 'household', 'car',
)


def is_category(label: str) -> bool:
    """Return True if ``label`` is one of the 22 category labels."""
    return label in CATEGORIES


class QuestionType(str, Enum):
    """The five fact categories a question can target."""

    STATIC = 'Static'
    NARRATIVE = 'Narrative'
    DYNAMIC = 'Dynamic'
    PROCEDURAL = 'Procedural'
    SUBJECTIVE = 'Subjective'

    @classmethod
    def parse(cls, value: str) -> 'QuestionType':
        """Parse a question type case-insensitively."""
        for member in cls:
            if member.value.lower() == str(value).strip().lower():
                return member
        raise ValueError(f"unknown question type: {value!r}")


class Bucket(str, Enum):
    """Popularity stratum of an entity."""

    HEAD = 'Head'
    TORSO = 'Torso'
    TAIL = 'Tail'
    UNASSIGNED = 'Unassigned'

    @classmethod
    def parse(cls, value: str) -> 'Bucket':
        for member in cls:
            if member.value.lower() == str(value).strip().lower():
                return member
        raise ValueError(f"unknown bucket: {value!r}")
