"""Node-name patterns such as ``wnode2{1-4}`` or ``w{01-03}n{a,b}``.

Grammar: literal text with any number of non-nested brace groups.  A group
is either a numeric range ``{lo-hi}`` or a list of alternatives
``{x,y,z}``.  Expansion is the left-to-right cross product of all segments.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from math import prod
from typing import Iterable, Union

DEFAULT_CAP = 65536

_RANGE_RE = re.compile(r"^(\d+)-(\d+)$")


class PatternError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnbalancedBraceError(PatternError):
    pass


class ReversedRangeError(PatternError):
    pass


class EmptyGroupError(PatternError):
    pass


class ExpansionTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class Literal:
    text: str

    def __len__(self):
        return 1

    def values(self):
        return [self.text]

    def render(self):
        return self.text


@dataclass(frozen=True)
class Range:
    lo: int
    hi: int
    width: int = 1

    def __post_init__(self):
        if self.lo < 0 or self.lo > self.hi:
            raise ValueError(f"invalid range {self.lo}-{self.hi}")

    def __len__(self):
        return self.hi - self.lo + 1

    def values(self):
        return [str(i).zfill(self.width) for i in range(self.lo, self.hi + 1)]

    def render(self):
        return "{%s-%s}" % (str(self.lo).zfill(self.width), str(self.hi).zfill(self.width))


@dataclass(frozen=True)
class Alternatives:
    choices: tuple[str, ...]

    def __len__(self):
        return len(self.choices)

    def values(self):
        return list(self.choices)

    def render(self):
        return "{" + ",".join(self.choices) + "}"


Segment = Union[Literal, Range, Alternatives]


@dataclass(frozen=True)
class NodePattern:
    segments: tuple[Segment, ...]

    def cardinality(self) -> int:
        return prod(len(s) for s in self.segments)

    def render(self) -> str:
        return "".join(s.render() for s in self.segments)


def _pad_width(lo_text: str, hi_text: str) -> int:
    padded = [t for t in (lo_text, hi_text) if len(t) > 1 and t.startswith("0")]
    if not padded:
        return 1
    return max(len(t) for t in padded)


def _parse_group(body: str, offset: int) -> Segment:
    # offset points at the opening brace
    if body == "":
        raise EmptyGroupError("empty brace group", offset)
    m = _RANGE_RE.match(body)
    if m:
        lo_text, hi_text = m.groups()
        lo, hi = int(lo_text), int(hi_text)
        if lo > hi:
            raise ReversedRangeError(f"reversed range {lo_text}-{hi_text}", offset)
        return Range(lo, hi, _pad_width(lo_text, hi_text))
    choices = body.split(",")
    pos = offset + 1
    for choice in choices:
        if choice == "":
            raise EmptyGroupError("empty alternative in brace group", pos)
        pos += len(choice) + 1
    return Alternatives(tuple(choices))


def parse_pattern(text: str) -> NodePattern:
    if not text:
        raise PatternError("empty pattern", 0)
    segments: list[Segment] = []
    literal_start = 0
    i = 0
    while i < len(text):
        c = text[i]
        if c == "}":
            raise UnbalancedBraceError("unmatched '}'", i)
        if c == "{":
            close = text.find("}", i + 1)
            nested = text.find("{", i + 1)
            if close == -1:
                raise UnbalancedBraceError("unclosed '{'", i)
            if nested != -1 and nested < close:
                raise UnbalancedBraceError("nested '{'", nested)
            if i > literal_start:
                segments.append(Literal(text[literal_start:i]))
            segments.append(_parse_group(text[i + 1:close], i))
            i = close + 1
            literal_start = i
            continue
        i += 1
    if literal_start < len(text):
        segments.append(Literal(text[literal_start:]))
    return NodePattern(tuple(segments))


def expand(pattern: NodePattern | str, cap: int = DEFAULT_CAP) -> list[str]:
    if isinstance(pattern, str):
        pattern = parse_pattern(pattern)
    size = pattern.cardinality()
    if size > cap:
        raise ExpansionTooLargeError(f"pattern expands to {size} nodes, cap is {cap}")
    nodes = [""]
    for seg in pattern.segments:
        vals = seg.values()
        nodes = [prefix + v for prefix in nodes for v in vals]
    return nodes


def render_list(nodes: Iterable[str]) -> str:
    """Render an explicit node list as a single alternatives pattern."""
    return Alternatives(tuple(nodes)).render()


def read_list(stream: Iterable[str]) -> list[str]:
    nodes = []
    for line in stream:
        name = line.strip()
        if name:
            nodes.append(name)
    return nodes


def duplicates(nodes: Iterable[str]) -> list[str]:
    """Hostnames that occur more than once, in first-seen order."""
    counts = Counter(nodes)
    return [n for n in counts if counts[n] > 1]


def resolve(arg: str, stdin=None, cap: int = DEFAULT_CAP) -> list[str]:
    """CLI helper: ``-`` reads one hostname per line from *stdin*, anything
    else is parsed as a pattern."""
    if arg == "-":
        if stdin is None:
            import sys
            stdin = sys.stdin
        return read_list(stdin)
    return expand(parse_pattern(arg), cap=cap)
