"""Template expressions for task-shim action configs.

Mustache-style {{ ... }} expressions over the request context: dotted-path
lookup (Go-flavored segments are folded onto the kebab-case JSON keys, so
.Task.General.ID resolves task["general"]["id"]) plus a small helper set:

    toJson <value>       compact JSON of the value
    default <fb> <value> fallback when the value is missing or empty
    trim <value>         strip surrounding whitespace
    env <name>           environment variable (empty when unset)

A path that resolves to nothing and is not absorbed by default is an error.
"""

from __future__ import annotations

import json
import os
import re
from typing import Any

_EXPR = re.compile(r"\{\{(.*?)\}\}", re.DOTALL)
_TOKEN = re.compile(r'"((?:[^"\\]|\\.)*)"|\'([^\']*)\'|(\S+)')
_CAMEL = re.compile(r"(?<=[a-z0-9])(?=[A-Z])")


class TemplateError(Exception):
    pass


class OutputNotParseable(Exception):
    pass


class _Missing:
    def __repr__(self):
        return "<missing>"


MISSING = _Missing()


def _fold_segment(segment: str) -> list[str]:
    """Candidate keys for one path segment."""
    candidates = [segment, segment.lower()]
    kebab = _CAMEL.sub("-", segment).lower()
    if kebab not in candidates:
        candidates.append(kebab)
    return candidates


def resolve_path(context: Any, path: str) -> Any:
    value = context
    for segment in path.strip(".").split("."):
        if not segment:
            continue
        if isinstance(value, list):
            try:
                value = value[int(segment)]
                continue
            except (ValueError, IndexError):
                return MISSING
        if not isinstance(value, dict):
            return MISSING
        for candidate in _fold_segment(segment):
            if candidate in value:
                value = value[candidate]
                break
        else:
            return MISSING
    return value


def _stringify(value: Any) -> str:
    if value is MISSING:
        raise TemplateError("expression resolved to a missing field")
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, (dict, list)):
        return json.dumps(value, separators=(",", ":"), sort_keys=True)
    return str(value)


def _eval_expression(expr: str, context: dict) -> Any:
    tokens: list[Any] = []
    for match in _TOKEN.finditer(expr.strip()):
        if match.group(1) is not None:
            tokens.append(("str", match.group(1).replace('\\"', '"')))
        elif match.group(2) is not None:
            tokens.append(("str", match.group(2)))
        else:
            tokens.append(("word", match.group(3)))
    if not tokens:
        raise TemplateError("empty template expression")

    def value_of(token) -> Any:
        kind, text = token
        if kind == "str":
            return text
        if text.startswith("."):
            return resolve_path(context, text)
        raise TemplateError(f"unexpected token {text!r}")

    kind, head = tokens[0]
    if kind == "word" and not head.startswith("."):
        args = [value_of(t) for t in tokens[1:]]
        return _call_helper(head, args, expr)
    if len(tokens) != 1:
        raise TemplateError(f"unexpected arguments in {expr.strip()!r}")
    return value_of(tokens[0])


def _call_helper(name: str, args: list[Any], expr: str) -> Any:
    if name == "toJson":
        if len(args) != 1:
            raise TemplateError("toJson takes exactly one argument")
        if args[0] is MISSING:
            raise TemplateError(f"toJson argument is missing in {expr.strip()!r}")
        return json.dumps(args[0], separators=(",", ":"), sort_keys=True)
    if name == "default":
        if len(args) != 2:
            raise TemplateError("default takes a fallback and a value")
        fallback, value = args
        if value is MISSING or value is None or value == "":
            return fallback
        return value
    if name == "trim":
        if len(args) != 1:
            raise TemplateError("trim takes exactly one argument")
        return _stringify(args[0]).strip()
    if name == "env":
        if len(args) != 1 or not isinstance(args[0], str):
            raise TemplateError("env takes one string argument")
        return os.environ.get(args[0], "")
    raise TemplateError(f"unknown helper {name!r}")


def render(template: str, context: dict) -> str:
    def substitute(match: re.Match) -> str:
        return _stringify(_eval_expression(match.group(1), context))

    return _EXPR.sub(substitute, template)
