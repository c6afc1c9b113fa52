"""
YAML document loading shared by crystal definitions and experiment configs.
Validation errors are reported with the dotted field path and the source line.
"""
from typing import Any, TypeVar

import yaml
from pydantic import BaseModel, ValidationError

ModelT = TypeVar("ModelT", bound=BaseModel)


class DocumentError(ValueError):
    """Raised when a structured text document cannot be parsed or validated."""

    def __init__(self, message: str, line: int | None = None, field_path: str | None = None):
        self.message = message
        self.line = line
        self.field_path = field_path
        where = []
        if field_path:
            where.append(field_path)
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


def locate_line(root: yaml.Node | None, loc: tuple[Any, ...]) -> int | None:
    """
    Walk a composed YAML node tree along a pydantic error location.
    Returns the 1-based line of the deepest node reached, or None without a tree.
    """
    if root is None:
        return None
    node = root
    for key in loc:
        child = None
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                if key_node.value == str(key):
                    child = value_node
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int):
            if 0 <= key < len(node.value):
                child = node.value[key]
        if child is None:
            break
        node = child
    return node.start_mark.line + 1


def field_path(loc: tuple[Any, ...]) -> str:
    return ".".join(str(part) for part in loc)


def compose_yaml(text: str, error_cls: type[DocumentError] = DocumentError) -> tuple[Any, yaml.Node | None]:
    """Parse YAML text into plain data plus its node tree (for line lookups)."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        line = mark.line + 1 if mark is not None else None
        raise error_cls(f"malformed document: {e.problem or e}", line=line) from e
    except yaml.YAMLError as e:
        raise error_cls(f"malformed document: {e}") from e
    return data, root


def validate_document(
    data: Any,
    root: yaml.Node | None,
    model_cls: type[ModelT],
    error_cls: type[DocumentError] = DocumentError,
) -> ModelT:
    """Validate parsed YAML data against a pydantic model, mapping the first error to its line."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise error_cls("document root must be a mapping", line=1)
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(first.get("loc", ()))
        raise error_cls(
            first.get("msg", "invalid value"),
            line=locate_line(root, loc),
            field_path=field_path(loc) or None,
        ) from e
