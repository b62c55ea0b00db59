"""Object attribute ontology shared by policy generation and scene sampling."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class AttrKind(str, Enum):
    SHAPE = "shape"
    COLOR = "color"
    SIZE = "size"
    MATERIAL = "material"


class Presentation(str, Enum):
    TEXTUAL = "textual"
    VISUAL_DEMO = "visual_demo"


ATTRIBUTE_VALUES: dict[AttrKind, tuple[str, ...]] = {
    AttrKind.SHAPE: ("cube", "sphere", "cylinder"),
    AttrKind.COLOR: ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"),
    AttrKind.SIZE: ("small", "large"),
    AttrKind.MATERIAL: ("rubber", "metal"),
}

ALL_KINDS: tuple[AttrKind, ...] = tuple(ATTRIBUTE_VALUES)


@dataclass(frozen=True)
class AttributeCondition:
    """An existence test: does the scene contain an object with this attribute?"""

    kind: AttrKind
    value: str
    presentation: Presentation = Presentation.TEXTUAL

    def __post_init__(self) -> None:
        if self.value not in ATTRIBUTE_VALUES[self.kind]:
            raise ValueError(f"{self.value!r} is not a legal {self.kind.value} value")

    def describe(self) -> str:
        return f"{self.kind.value} {self.value}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "value": self.value,
            "presentation": self.presentation.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeCondition":
        return cls(
            kind=AttrKind(d["kind"]),
            value=d["value"],
            presentation=Presentation(d.get("presentation", "textual")),
        )
