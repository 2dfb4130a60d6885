"""Bit-exact document serialization and shard files.

Two interchangeable formats hold extracted document trees.

TEXT format (UTF-8, LF line endings, space-separated fields)::

    DOC <doc_id>
    NODE <depth> <kind> <n_heading> <n_body>
    W <text> <b> <i> <u>
    ...
    END

Nodes appear in depth-first order; each NODE line is followed by its
n_heading heading words and then its n_body body words, flags written as
0/1. Kind codes: TITLE=0, ABSTRACT=1, SECTION=2, SUBSECTION=3,
SUBSUBSECTION=4, PARAGRAPH=5. A shard file concatenates DOC..END blocks.

TREE format: one JSON record per document. Every structural record has the
keys `kind`, `title`, `content`, `sub-levels`; words are 4-field records
[text, b, i, u]. The top-level record additionally carries `doc_id`. The
`kind` key is required to keep the encoding lossless: a headingless node
directly under the root could otherwise be either an abstract or a
paragraph. Shard files are JSONL, default ten documents per shard.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterator, List, Sequence, Union

from .errors import FormatError
from .latex import KIND_LEVEL, CorpusStats, DocNode, DocumentTree, NodeKind, StyledWord

TEXT = "text"
TREE = "tree"

DEFAULT_SHARD_SIZE = 10


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """Write via a temp file in the same directory plus atomic rename, so a
    failed command never leaves a partial file behind."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# TEXT format
# ---------------------------------------------------------------------------


def _encode_text(tree: DocumentTree) -> bytes:
    lines: List[str] = [f"DOC {tree.doc_id}"]

    def emit(node: DocNode, depth: int) -> None:
        lines.append(f"NODE {depth} {int(node.kind)} {len(node.heading)} {len(node.body)}")
        for w in list(node.heading) + list(node.body):
            lines.append(f"W {w.text} {int(w.bold)} {int(w.italic)} {int(w.underline)}")
        for child in node.children:
            emit(child, depth + 1)

    emit(tree.root, 0)
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_word_line(line: str, lineno: int) -> StyledWord:
    parts = line.split(" ")
    if len(parts) != 5 or parts[0] != "W":
        raise FormatError(f"malformed word line {line!r}", lineno)
    text = parts[1]
    flags = parts[2:]
    if not text:
        raise FormatError("empty word text", lineno)
    if any(f not in ("0", "1") for f in flags):
        raise FormatError(f"style flags must be 0 or 1, got {flags}", lineno)
    try:
        return StyledWord(text, flags[0] == "1", flags[1] == "1", flags[2] == "1")
    except ValueError as exc:
        raise FormatError(str(exc), lineno) from exc


def _decode_text_block(lines: Sequence[str], start_lineno: int = 1) -> DocumentTree:
    """Decode one DOC..END block given as a list of lines."""
    idx = 0

    def lineno() -> int:
        return start_lineno + idx

    if idx >= len(lines) or not lines[idx].startswith("DOC "):
        raise FormatError("expected DOC header", lineno())
    doc_id = lines[idx][4:]
    if not doc_id:
        raise FormatError("empty doc id", lineno())
    idx += 1

    root: DocNode | None = None
    stack: List[tuple[DocNode, int]] = []
    while idx < len(lines):
        line = lines[idx]
        if line == "END":
            idx += 1
            break
        parts = line.split(" ")
        if len(parts) != 5 or parts[0] != "NODE":
            raise FormatError(f"expected NODE or END, got {line!r}", lineno())
        try:
            depth, kind_code, n_heading, n_body = (int(p) for p in parts[1:])
        except ValueError:
            raise FormatError(f"non-integer NODE fields in {line!r}", lineno()) from None
        try:
            kind = NodeKind(kind_code)
        except ValueError:
            raise FormatError(f"unknown kind-code {kind_code}", lineno()) from None
        if n_heading < 0 or n_body < 0:
            raise FormatError("negative word count", lineno())
        idx += 1
        words = []
        for _ in range(n_heading + n_body):
            if idx >= len(lines):
                raise FormatError("truncated word list", lineno())
            words.append(_parse_word_line(lines[idx], lineno()))
            idx += 1
        node = DocNode(kind, heading=words[:n_heading], body=words[n_heading:])
        if root is None:
            if depth != 0 or kind != NodeKind.TITLE:
                raise FormatError(f"first node must be depth 0 kind 0, got depth {depth} kind {kind_code}", lineno())
            root = node
            stack = [(node, 0)]
            continue
        if depth < 1 or depth > stack[-1][1] + 1:
            raise FormatError(f"invalid depth {depth} after depth {stack[-1][1]}", lineno())
        while stack[-1][1] >= depth:
            stack.pop()
        parent = stack[-1][0]
        if parent.kind == NodeKind.PARAGRAPH:
            raise FormatError("PARAGRAPH nodes cannot have children", lineno())
        if KIND_LEVEL[kind] <= KIND_LEVEL[parent.kind]:
            raise FormatError(f"kind {kind.name} cannot nest under {parent.kind.name}", lineno())
        parent.children.append(node)
        stack.append((node, depth))
    else:
        raise FormatError("missing END", lineno())
    if root is None:
        raise FormatError("document has no nodes", lineno())
    if idx != len(lines):
        raise FormatError(f"trailing content after END: {lines[idx]!r}", start_lineno + idx)
    return DocumentTree(doc_id, root)


# ---------------------------------------------------------------------------
# TREE format
# ---------------------------------------------------------------------------


def _words_to_records(words: Sequence[StyledWord]) -> List[list]:
    return [[w.text, int(w.bold), int(w.italic), int(w.underline)] for w in words]


def _node_to_record(node: DocNode) -> dict:
    return {
        "kind": int(node.kind),
        "title": _words_to_records(node.heading),
        "content": _words_to_records(node.body),
        "sub-levels": [_node_to_record(c) for c in node.children],
    }


def _encode_tree(tree: DocumentTree) -> bytes:
    record = {"doc_id": tree.doc_id, **_node_to_record(tree.root)}
    return (json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def _words_from_records(records, where: str) -> List[StyledWord]:
    words = []
    for rec in records:
        if not (isinstance(rec, list) and len(rec) == 4 and isinstance(rec[0], str)):
            raise FormatError(f"{where}: word records must be [text, b, i, u], got {rec!r}")
        if any(flag not in (0, 1) for flag in rec[1:]):
            raise FormatError(f"{where}: style flags must be 0 or 1, got {rec!r}")
        try:
            words.append(StyledWord(rec[0], bool(rec[1]), bool(rec[2]), bool(rec[3])))
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from exc
    return words


def _node_from_record(record: dict, where: str, parent_kind: NodeKind | None) -> DocNode:
    if not isinstance(record, dict):
        raise FormatError(f"{where}: expected an object, got {type(record).__name__}")
    expected = {"kind", "title", "content", "sub-levels"}
    keys = set(record) - {"doc_id"}
    if keys != expected:
        raise FormatError(f"{where}: record keys must be {sorted(expected)}, got {sorted(keys)}")
    try:
        kind = NodeKind(record["kind"])
    except (ValueError, TypeError):
        raise FormatError(f"{where}: unknown kind-code {record['kind']!r}") from None
    if parent_kind is None:
        if kind != NodeKind.TITLE:
            raise FormatError(f"{where}: root record must have kind 0")
    else:
        if parent_kind == NodeKind.PARAGRAPH:
            raise FormatError(f"{where}: PARAGRAPH nodes cannot have children")
        if KIND_LEVEL[kind] <= KIND_LEVEL[parent_kind]:
            raise FormatError(f"{where}: kind {kind.name} cannot nest under {parent_kind.name}")
    node = DocNode(
        kind,
        heading=_words_from_records(record["title"], where),
        body=_words_from_records(record["content"], where),
    )
    subs = record["sub-levels"]
    if not isinstance(subs, list):
        raise FormatError(f"{where}: sub-levels must be a list")
    for j, sub in enumerate(subs):
        node.children.append(_node_from_record(sub, f"{where}.sub-levels[{j}]", kind))
    return node


def _decode_tree(data: bytes) -> DocumentTree:
    try:
        record = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(record, dict) or "doc_id" not in record:
        raise FormatError("top-level record must be an object with a doc_id")
    doc_id = record["doc_id"]
    if not isinstance(doc_id, str) or not doc_id:
        raise FormatError(f"invalid doc_id {doc_id!r}")
    return DocumentTree(doc_id, _node_from_record(record, "root", None))


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def encode_document(tree: DocumentTree, format: str) -> bytes:
    """Serialize a tree. Identical trees always produce identical bytes."""
    if format == TEXT:
        return _encode_text(tree)
    if format == TREE:
        return _encode_tree(tree)
    raise ValueError(f"unknown format {format!r}")


def decode_document(data: bytes, format: str) -> DocumentTree:
    """Inverse of encode_document. Raises FormatError on any grammar
    violation, with the line number for TEXT input."""
    if format == TEXT:
        text = data.decode("utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return _decode_text_block(lines)
    if format == TREE:
        return _decode_tree(data)
    raise ValueError(f"unknown format {format!r}")


def iter_documents(path: Union[str, Path]) -> Iterator[DocumentTree]:
    """Yield the documents stored in one file, TEXT or TREE, single or shard."""
    path = Path(path)
    if path.suffix == ".txt":
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        block: List[str] = []
        block_start = 1
        for i, line in enumerate(lines, start=1):
            block.append(line)
            if line == "END":
                yield _decode_text_block(block, block_start)
                block = []
                block_start = i + 1
        if block:
            raise FormatError("trailing lines without END", block_start)
    else:
        with path.open("rb") as fh:
            for i, raw in enumerate(fh, start=1):
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    yield _decode_tree(raw)
                except FormatError as exc:
                    raise FormatError(f"{path.name} record {i}: {exc}") from exc


def read_tree_dir(directory: Union[str, Path]) -> List[DocumentTree]:
    """Load every document from a directory, in sorted file order.

    Accepts per-document .txt/.json files and shard-*.txt/.jsonl shard
    files; other files (annotations, configs) are ignored."""
    directory = Path(directory)
    trees: List[DocumentTree] = []
    for path in sorted(directory.iterdir()):
        if path.suffix == ".jsonl" and not path.name.startswith("shard-"):
            continue
        if path.suffix in (".txt", ".json", ".jsonl") and path.name != "effective-config.txt":
            trees.extend(iter_documents(path))
    return trees


def write_tree_shards(
    trees: Sequence[DocumentTree],
    out_dir: Union[str, Path],
    format: str = TREE,
    shard_size: int = DEFAULT_SHARD_SIZE,
) -> List[Path]:
    """Write documents into shard files of shard_size documents each."""
    if shard_size < 1:
        raise ValueError("shard_size must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".txt" if format == TEXT else ".jsonl"
    paths = []
    for k in range(0, len(trees), shard_size):
        shard = trees[k : k + shard_size]
        blob = b"".join(encode_document(t, format) for t in shard)
        path = out_dir / f"shard-{k // shard_size:04d}{suffix}"
        atomic_write_bytes(path, blob)
        paths.append(path)
    return paths


def stats_csv(stats: CorpusStats) -> str:
    """Render corpus statistics as delimited text, one metric per row."""
    rows = ["metric,min,max,mean,sd,n"]
    for name, m in (
        ("tokens_per_doc", stats.tokens_per_doc),
        ("headers_per_doc", stats.headers_per_doc),
        ("tokens_per_header", stats.tokens_per_header),
    ):
        rows.append(f"{name},{m.minimum:.12g},{m.maximum:.12g},{m.mean:.12g},{m.sd:.12g},{m.n_values}")
    return "\n".join(rows) + "\n"
