"""Trajectory categories: direction x vehicle class x aggressiveness."""

from dataclasses import dataclass

from .errors import LabelingError

DIRECTIONS = ("left", "right")
VEHICLE_CLASSES = ("car", "truck")
AGGRESSIVENESS = ("low", "normal", "over")
N_CATEGORIES = len(DIRECTIONS) * len(VEHICLE_CLASSES) * len(AGGRESSIVENESS)
NULL_INDEX = N_CATEGORIES

_ALIASES = {"less": "low", "norm": "normal", "lowest": "low"}


@dataclass(frozen=True, order=True)
class ConditionLabel:
    direction: str
    vehicle_class: str
    aggressiveness: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise LabelingError(f"unknown direction {self.direction!r}")
        if self.vehicle_class not in VEHICLE_CLASSES:
            raise LabelingError(f"unknown vehicle class {self.vehicle_class!r}")
        if self.aggressiveness not in AGGRESSIVENESS:
            raise LabelingError(f"unknown aggressiveness {self.aggressiveness!r}")

    @property
    def index(self):
        return (
            DIRECTIONS.index(self.direction) * 6
            + VEHICLE_CLASSES.index(self.vehicle_class) * 3
            + AGGRESSIVENESS.index(self.aggressiveness)
        )

    @classmethod
    def from_index(cls, index):
        index = int(index)
        if not 0 <= index < N_CATEGORIES:
            raise LabelingError(f"category index {index} outside 0..{N_CATEGORIES - 1}")
        d, rest = divmod(index, 6)
        c, a = divmod(rest, 3)
        return cls(DIRECTIONS[d], VEHICLE_CLASSES[c], AGGRESSIVENESS[a])

    @classmethod
    def parse(cls, text):
        """Accept ``"car/left/normal"`` (any order of the three parts) or an index."""
        text = str(text).strip()
        if text.lstrip("-").isdigit():
            return cls.from_index(int(text))
        parts = [p.strip().lower() for p in text.replace(",", "/").split("/") if p.strip()]
        parts = [_ALIASES.get(p, p) for p in parts]
        found = {}
        for p in parts:
            for key, pool in (("direction", DIRECTIONS), ("vehicle_class", VEHICLE_CLASSES),
                              ("aggressiveness", AGGRESSIVENESS)):
                if p in pool:
                    if key in found:
                        raise LabelingError(f"{text!r} names two {key} values")
                    found[key] = p
                    break
            else:
                raise LabelingError(f"unrecognized category part {p!r} in {text!r}; valid: {valid_categories_text()}")
        if len(found) != 3:
            raise LabelingError(f"category {text!r} is incomplete; valid: {valid_categories_text()}")
        return cls(**found)

    def symbol(self):
        return f"{self.vehicle_class}/{self.direction}/{self.aggressiveness}"

    def __str__(self):
        return self.symbol()


def all_labels():
    return [ConditionLabel.from_index(i) for i in range(N_CATEGORIES)]


def table_order():
    """Vehicle class, then direction, then aggressiveness, as coverage tables are laid out."""
    return [ConditionLabel(d, c, a) for c in VEHICLE_CLASSES for d in DIRECTIONS for a in AGGRESSIVENESS]


def valid_categories_text():
    return ", ".join(lab.symbol() for lab in table_order())
