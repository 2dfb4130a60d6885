"""LaTeX noise stripping and hierarchical structure extraction.

The grammar is deliberately small: titles, the abstract environment,
sections, subsections, subsubsections, and paragraph headings define the
tree; bold/italic/underline commands set per-word style flags; every other
command is dropped while the text of its braced arguments is kept.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, List, NamedTuple, Tuple

from .errors import EmptyCorpusError, EmptyDocumentError


class NodeKind(IntEnum):
    """Node kinds, ordered from document root to leaf. Values double as the
    kind codes of the serialized formats."""

    TITLE = 0
    ABSTRACT = 1
    SECTION = 2
    SUBSECTION = 3
    SUBSUBSECTION = 4
    PARAGRAPH = 5


# Nesting depth of each kind. A child's level must be strictly greater than
# its parent's; ABSTRACT and SECTION share a level and cannot nest.
KIND_LEVEL = {
    NodeKind.TITLE: 0,
    NodeKind.ABSTRACT: 1,
    NodeKind.SECTION: 1,
    NodeKind.SUBSECTION: 2,
    NodeKind.SUBSUBSECTION: 3,
    NodeKind.PARAGRAPH: 4,
}


@dataclass(frozen=True)
class StyledWord:
    """A single whitespace-free word with its style flags."""

    text: str
    bold: bool = False
    italic: bool = False
    underline: bool = False

    def __post_init__(self):
        if not self.text:
            raise ValueError("StyledWord text must be non-empty")
        if any(ch.isspace() for ch in self.text) or "\\" in self.text:
            raise ValueError(f"StyledWord text may not contain whitespace or backslashes: {self.text!r}")


@dataclass
class DocNode:
    """One node of the document hierarchy.

    heading carries the node's title words (HEADER role downstream), body
    the running text directly under it. PARAGRAPH nodes never have children;
    a PARAGRAPH may carry a heading when it came from an explicit paragraph
    heading command.
    """

    kind: NodeKind
    heading: List[StyledWord] = field(default_factory=list)
    body: List[StyledWord] = field(default_factory=list)
    children: List["DocNode"] = field(default_factory=list)

    def walk(self) -> Iterable["DocNode"]:
        """Depth-first iteration over this node and all descendants."""
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass
class DocumentTree:
    doc_id: str
    root: DocNode

    def word_count(self) -> int:
        return sum(len(n.heading) + len(n.body) for n in self.root.walk())

    def header_count(self) -> int:
        return sum(1 for n in self.root.walk() if n.heading)


class StripResult(NamedTuple):
    text: str
    warnings: List[str]


# Environments removed wholesale, including starred forms.
STRIPPED_ENVIRONMENTS = (
    "figure*",
    "figure",
    "table*",
    "table",
    "equation*",
    "equation",
    "align*",
    "align",
    "displaymath",
)

_STYLE_COMMANDS = {"textbf": "bold", "textit": "italic", "emph": "italic", "underline": "underline"}
_ESCAPES = set("%$&_#{}")


def _find_unescaped(s: str, token: str, start: int) -> int:
    """Index of the next occurrence of token not preceded by an odd number
    of backslashes, or -1."""
    i = start
    while True:
        i = s.find(token, i)
        if i == -1:
            return -1
        nbs = 0
        j = i - 1
        while j >= 0 and s[j] == "\\":
            nbs += 1
            j -= 1
        if nbs % 2 == 0:
            return i
        i += 1


def _skip_environment(s: str, begin_at: int, env: str) -> int:
    """Return the index just past the matching \\end{env}, or -1 when the
    environment never closes. Nested same-name environments are respected."""
    begin_tok = "\\begin{" + env + "}"
    end_tok = "\\end{" + env + "}"
    depth = 1
    i = begin_at + len(begin_tok)
    while depth > 0:
        nb = s.find(begin_tok, i)
        ne = s.find(end_tok, i)
        if ne == -1:
            return -1
        if nb != -1 and nb < ne:
            depth += 1
            i = nb + len(begin_tok)
        else:
            depth -= 1
            i = ne + len(end_tok)
    return i


def strip_noise(source: str) -> StripResult:
    """Remove comments, noise environments, and math spans.

    Unescaped %-comments are deleted up to (not including) the newline.
    figure/table/equation/align/displaymath environments, $...$ and $$...$$
    spans, and \\[...\\] display math are deleted wholesale. Everything else
    is copied through byte for byte. Unbalanced constructs are stripped to
    end of input and reported in the warning list.
    """
    out: List[str] = []
    warnings: List[str] = []
    s = source
    i = 0
    n = len(s)
    while i < n:
        c = s[i]
        if c == "\\":
            if s.startswith("\\begin{", i):
                env = next((e for e in STRIPPED_ENVIRONMENTS if s.startswith("\\begin{" + e + "}", i)), None)
                if env is not None:
                    end = _skip_environment(s, i, env)
                    if end == -1:
                        warnings.append(f"unterminated environment {env!r} at offset {i}")
                        i = n
                    else:
                        i = end
                    continue
            if s.startswith("\\[", i):
                end = s.find("\\]", i + 2)
                if end == -1:
                    warnings.append(f"unterminated display math at offset {i}")
                    i = n
                else:
                    i = end + 2
                continue
            # Copy the backslash and the following character verbatim so that
            # escapes like \% and \$ never trigger comment or math handling.
            out.append(c)
            i += 1
            if i < n:
                out.append(s[i])
                i += 1
            continue
        if c == "%":
            nl = s.find("\n", i)
            i = n if nl == -1 else nl
            continue
        if c == "$":
            if s.startswith("$$", i):
                end = _find_unescaped(s, "$$", i + 2)
                closing = 2
            else:
                end = _find_unescaped(s, "$", i + 1)
                closing = 1
            if end == -1:
                warnings.append(f"unterminated math span at offset {i}")
                i = n
            else:
                i = end + closing
            continue
        out.append(c)
        i += 1
    return StripResult("".join(out), warnings)


class _InlineScanner:
    """Turns a text span into StyledWords.

    Words are split on whitespace. Style commands flush the current word,
    so a style boundary is always a word boundary; plain {...} groups are
    transparent. Nested style commands compose their flags.
    """

    def __init__(self, text: str):
        self.t = text
        self.i = 0
        self.words: List[StyledWord] = []
        self.buf: List[str] = []

    def _flush(self, style: Tuple[bool, bool, bool]) -> None:
        if self.buf:
            self.words.append(StyledWord("".join(self.buf), *style))
            self.buf.clear()

    def _skip_bracket_arg(self) -> None:
        j = self.i
        while j < len(self.t) and self.t[j] in " \t":
            j += 1
        if j < len(self.t) and self.t[j] == "[":
            end = self.t.find("]", j + 1)
            self.i = len(self.t) if end == -1 else end + 1

    def _enter_group(self) -> bool:
        """Advance past a '{' that may be preceded by spaces. False if the
        next meaningful character is not a group opener."""
        j = self.i
        while j < len(self.t) and self.t[j] in " \t":
            j += 1
        if j < len(self.t) and self.t[j] == "{":
            self.i = j + 1
            return True
        return False

    def run(self, style: Tuple[bool, bool, bool], stop_at_close: bool = False, flush_at_close: bool = False) -> None:
        t = self.t
        while self.i < len(t):
            c = t[self.i]
            if c == "}":
                self.i += 1
                if stop_at_close:
                    if flush_at_close:
                        self._flush(style)
                    return
                continue  # stray closer, ignore
            if c == "{":
                self.i += 1
                self.run(style, stop_at_close=True, flush_at_close=False)
                continue
            if c == "\\":
                self.i += 1
                if self.i >= len(t):
                    break
                c2 = t[self.i]
                if not c2.isalpha():
                    self.i += 1
                    if c2 in _ESCAPES:
                        self.buf.append(c2)
                    else:
                        self._flush(style)  # \\ and control symbols act as space
                    continue
                m = re.match(r"[A-Za-z]+\*?", t[self.i :])
                name = m.group(0).rstrip("*")
                self.i += m.end()
                if name in _STYLE_COMMANDS:
                    self._flush(style)
                    if self._enter_group():
                        bold, italic, underline = style
                        dim = _STYLE_COMMANDS[name]
                        new_style = (bold or dim == "bold", italic or dim == "italic", underline or dim == "underline")
                        self.run(new_style, stop_at_close=True, flush_at_close=True)
                    continue
                if name in ("begin", "end"):
                    # Environment markers are pure syntax; drop the name group.
                    if self._enter_group():
                        depth = 1
                        while self.i < len(t) and depth:
                            if t[self.i] == "{":
                                depth += 1
                            elif t[self.i] == "}":
                                depth -= 1
                            self.i += 1
                    continue
                # Any other command: drop it and an optional [..] argument;
                # its braced arguments fall through as transparent groups.
                self._skip_bracket_arg()
                continue
            if c.isspace() or c == "~":
                self._flush(style)
                self.i += 1
                continue
            self.buf.append(c)
            self.i += 1
        self._flush(style)


def inline_words(text: str, bold: bool = False, italic: bool = False, underline: bool = False) -> List[StyledWord]:
    """Extract styled words from a text span that contains no sectioning."""
    scanner = _InlineScanner(text)
    scanner.run((bold, italic, underline))
    return scanner.words


def _balanced_group(s: str, open_at: int) -> Tuple[str, int]:
    """Content of the {...} group starting at open_at and the index past it.
    An unbalanced group extends to end of input."""
    depth = 1
    i = open_at + 1
    start = i
    while i < len(s) and depth:
        c = s[i]
        if c == "\\":
            i += 2
            continue
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
        i += 1
    if depth:
        return s[start:], len(s)
    return s[start : i - 1], i


_SECTION_RE = re.compile(
    r"\\(title|section|subsection|subsubsection|paragraph)\*?\s*\{|\\begin\{abstract\}"
)

_CMD_KIND = {
    "section": NodeKind.SECTION,
    "subsection": NodeKind.SUBSECTION,
    "subsubsection": NodeKind.SUBSUBSECTION,
    "paragraph": NodeKind.PARAGRAPH,
}

_BLANK_LINE_RE = re.compile(r"\n[ \t]*\n")


def _flush_text(node: DocNode, text: str) -> None:
    if node.kind == NodeKind.PARAGRAPH:
        node.body.extend(inline_words(text))
        return
    for chunk in _BLANK_LINE_RE.split(text):
        words = inline_words(chunk)
        if words:
            node.children.append(DocNode(NodeKind.PARAGRAPH, body=words))


def extract_tree(source: str, doc_id: str) -> DocumentTree:
    """Parse a noise-stripped LaTeX source into a document tree.

    Sectioning commands nest by level; running text between them becomes
    PARAGRAPH nodes, one per blank-line-separated block. Raises
    EmptyDocumentError when no words survive.
    """
    root = DocNode(NodeKind.TITLE)
    stack = [root]
    title_seen = False
    pos = 0
    while True:
        m = _SECTION_RE.search(source, pos)
        if m is None:
            _flush_text(stack[-1], source[pos:])
            break
        _flush_text(stack[-1], source[pos : m.start()])
        if m.group(0) == "\\begin{abstract}":
            end = source.find("\\end{abstract}", m.end())
            if end == -1:
                content, pos = source[m.end() :], len(source)
            else:
                content, pos = source[m.end() : end], end + len("\\end{abstract}")
            node = DocNode(NodeKind.ABSTRACT, body=inline_words(content))
            while KIND_LEVEL[stack[-1].kind] >= KIND_LEVEL[NodeKind.ABSTRACT]:
                stack.pop()
            stack[-1].children.append(node)
            continue
        heading_src, pos = _balanced_group(source, m.end() - 1)
        heading = inline_words(heading_src)
        cmd = m.group(1)
        if cmd == "title":
            if not title_seen:
                root.heading = heading
                title_seen = True
            continue
        kind = _CMD_KIND[cmd]
        node = DocNode(kind, heading=heading)
        while KIND_LEVEL[stack[-1].kind] >= KIND_LEVEL[kind]:
            stack.pop()
        stack[-1].children.append(node)
        stack.append(node)
    tree = DocumentTree(doc_id, root)
    if tree.word_count() == 0:
        raise EmptyDocumentError(f"document {doc_id!r}: no words survived extraction")
    return tree


@dataclass(frozen=True)
class MetricStats:
    minimum: float
    maximum: float
    mean: float
    sd: float
    n_values: int


@dataclass(frozen=True)
class CorpusStats:
    tokens_per_doc: MetricStats
    headers_per_doc: MetricStats
    tokens_per_header: MetricStats


def _metric_stats(values: List[float]) -> MetricStats:
    if not values:
        return MetricStats(0.0, 0.0, 0.0, 0.0, 0)
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n  # population variance
    return MetricStats(min(values), max(values), mean, math.sqrt(var), n)


def corpus_stats(trees: Iterable[DocumentTree]) -> CorpusStats:
    """min/max/mean/population-sd of tokens per document, headers per
    document, and the per-document tokens-to-headers ratio. Documents with
    zero headers are excluded from the ratio metric only."""
    tokens: List[float] = []
    headers: List[float] = []
    ratios: List[float] = []
    for tree in trees:
        t = tree.word_count()
        h = tree.header_count()
        tokens.append(float(t))
        headers.append(float(h))
        if h > 0:
            ratios.append(t / h)
    if not tokens:
        raise EmptyCorpusError("corpus_stats requires at least one document")
    return CorpusStats(_metric_stats(tokens), _metric_stats(headers), _metric_stats(ratios))
