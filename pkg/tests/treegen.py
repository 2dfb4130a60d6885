"""Random document-tree generator shared by round-trip and property tests."""

import numpy as np

from structmlm.latex import DocNode, DocumentTree, NodeKind, StyledWord

# Words mix ASCII, punctuation, and non-ASCII; never whitespace or backslash.
_WORD_CHARS = "abcdefghijklmnopqrstuvwxyzABCDEFXYZ0123456789.,;:!?()'-éüαβγ中本"

_CHILD_KINDS = {
    NodeKind.TITLE: [NodeKind.ABSTRACT, NodeKind.SECTION, NodeKind.SUBSECTION, NodeKind.SUBSUBSECTION, NodeKind.PARAGRAPH],
    NodeKind.ABSTRACT: [NodeKind.SUBSECTION, NodeKind.SUBSUBSECTION, NodeKind.PARAGRAPH],
    NodeKind.SECTION: [NodeKind.SUBSECTION, NodeKind.SUBSUBSECTION, NodeKind.PARAGRAPH],
    NodeKind.SUBSECTION: [NodeKind.SUBSUBSECTION, NodeKind.PARAGRAPH],
    NodeKind.SUBSUBSECTION: [NodeKind.PARAGRAPH],
}


def random_word(rng: np.random.Generator) -> str:
    length = int(rng.integers(1, 11))
    return "".join(_WORD_CHARS[i] for i in rng.integers(0, len(_WORD_CHARS), size=length))


def random_words(rng: np.random.Generator, low: int, high: int):
    return [
        StyledWord(random_word(rng), bool(rng.integers(0, 2)), bool(rng.integers(0, 2)), bool(rng.integers(0, 2)))
        for _ in range(int(rng.integers(low, high + 1)))
    ]


def _random_node(rng: np.random.Generator, kind: NodeKind, fanout: int) -> DocNode:
    # Explicit paragraph headings exist, so PARAGRAPH nodes may carry one.
    heading = [] if kind == NodeKind.ABSTRACT else random_words(rng, 0, 3)
    body = random_words(rng, 0, 5)
    node = DocNode(kind, heading=heading, body=body)
    if kind != NodeKind.PARAGRAPH and fanout > 0:
        for _ in range(int(rng.integers(0, fanout + 1))):
            child_kind = _CHILD_KINDS[kind][int(rng.integers(0, len(_CHILD_KINDS[kind])))]
            node.children.append(_random_node(rng, child_kind, fanout - 1))
    return node


def random_tree(seed: int, doc_id=None) -> DocumentTree:
    rng = np.random.default_rng(seed)
    root = _random_node(rng, NodeKind.TITLE, fanout=3)
    if not root.heading and not root.body and not root.children:
        root.heading = random_words(rng, 1, 2)
    return DocumentTree(doc_id or f"rand-{seed}", root)
