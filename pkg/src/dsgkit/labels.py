"""Semantic class ids carried by mesh vertices."""

UNKNOWN = 0
WALL = 1
FLOOR = 2
CEILING = 3

OBJECT_CLASSES = {10: "chair", 11: "table", 12: "cup", 13: "sofa"}
STRUCTURE_CLASSES = {WALL: "wall", FLOOR: "floor", CEILING: "ceiling"}

_BY_NAME = {name: cid for cid, name in {**OBJECT_CLASSES, **STRUCTURE_CLASSES}.items()}


def class_name(label: int) -> str:
    return OBJECT_CLASSES.get(int(label)) or STRUCTURE_CLASSES.get(int(label)) or f"class{int(label)}"


def class_id(name: str | int) -> int:
    """Resolve a class name (``"chair"``) or numeric string/int to its id."""
    if isinstance(name, int):
        return name
    if name in _BY_NAME:
        return _BY_NAME[name]
    try:
        return int(name)
    except ValueError:
        raise KeyError(f"unknown semantic class {name!r}") from None
