"""Vocabulary, token sequences, MLM masking, and the synthetic corpus.

The tokenizer is word-level with a frequency cutoff; it sits behind the
Vocabulary class so a subword scheme could be swapped in without touching
the rest of the pipeline. Roles mark each token as HEADER (it came from a
node heading) or BODY, and the global attention mask downstream is exactly
the HEADER indicator.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .docfile import atomic_write_bytes
from .errors import EmptyCorpusError, FormatError
from .latex import DocNode, DocumentTree, NodeKind, StyledWord

PAD, UNK, MASK, CLS, SEP = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<unk>", "<mask>", "<cls>", "<sep>")
N_RESERVED = len(RESERVED_TOKENS)

BODY = 0
HEADER = 1

LABEL_IGNORE = -1


class Vocabulary:
    """Bijection between token strings and ids; ids 0..4 are reserved."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self._ids: Dict[str, int] = {t: i + N_RESERVED for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return N_RESERVED + len(self.tokens)

    def id_of(self, word: str) -> int:
        return self._ids.get(word.lower(), UNK)

    def token_of(self, token_id: int) -> str:
        if 0 <= token_id < N_RESERVED:
            return RESERVED_TOKENS[token_id]
        return self.tokens[token_id - N_RESERVED]

    def save(self, path: Union[str, Path]) -> None:
        """One token per line; the first five lines are the reserved header,
        so a corpus token's 0-based line number past the header is id - 5."""
        lines = list(RESERVED_TOKENS) + self.tokens
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if lines[:N_RESERVED] != list(RESERVED_TOKENS):
            raise FormatError(f"{path}: missing reserved token header")
        return cls(lines[N_RESERVED:])


def build_vocab(corpus: Iterable[DocumentTree], max_size: int) -> Vocabulary:
    """The max_size - 5 most frequent lowercased words, ties broken
    lexicographically."""
    if max_size <= N_RESERVED:
        raise ValueError(f"max_size must exceed {N_RESERVED}")
    counts: Counter = Counter()
    n_docs = 0
    for tree in corpus:
        n_docs += 1
        for node in tree.root.walk():
            for w in list(node.heading) + list(node.body):
                word = w.text.lower()
                if word not in RESERVED_TOKENS:
                    counts[word] += 1
    if n_docs == 0:
        raise EmptyCorpusError("build_vocab requires a non-empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([w for w, _ in ranked[: max_size - N_RESERVED]])


@dataclass
class TokenizedDoc:
    """Flattened token sequence with per-token role and character length.

    node_starts lists the positions where a tree node's token run begins.
    It exists so chunking can prefer node boundaries without consulting
    roles; the training trajectory with global attention disabled must not
    depend on the roles field.
    """

    doc_id: str
    ids: np.ndarray  # int64, shape (n,)
    roles: np.ndarray  # uint8, HEADER/BODY, shape (n,)
    char_lens: np.ndarray  # int64, shape (n,)
    node_starts: np.ndarray = None  # int64, sorted, first entry 0

    def __post_init__(self):
        if self.node_starts is None:
            self.node_starts = np.zeros(min(1, len(self.ids)), dtype=np.int64)

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def slice(self, start: int, stop: int, suffix: str = "") -> "TokenizedDoc":
        ns = [int(p) - start for p in self.node_starts if start <= int(p) < stop]
        if not ns or ns[0] != 0:
            ns.insert(0, 0)
        return TokenizedDoc(
            self.doc_id + suffix,
            self.ids[start:stop].copy(),
            self.roles[start:stop].copy(),
            self.char_lens[start:stop].copy(),
            np.asarray(ns, dtype=np.int64),
        )


def tokenize_tree(tree: DocumentTree, vocab: Vocabulary) -> TokenizedDoc:
    """Depth-first flattening: each node contributes its heading words
    (role HEADER), then its body words (role BODY), then its children.
    Out-of-vocabulary words map to UNK but keep their true character length."""
    ids: List[int] = []
    roles: List[int] = []
    char_lens: List[int] = []
    node_starts: List[int] = []

    def visit(node: DocNode) -> None:
        if node.heading or node.body:
            node_starts.append(len(ids))
        for w in node.heading:
            ids.append(vocab.id_of(w.text))
            roles.append(HEADER)
            char_lens.append(len(w.text))
        for w in node.body:
            ids.append(vocab.id_of(w.text))
            roles.append(BODY)
            char_lens.append(len(w.text))
        for child in node.children:
            visit(child)

    visit(tree.root)
    if not node_starts or node_starts[0] != 0:
        node_starts.insert(0, 0)
    return TokenizedDoc(
        tree.doc_id,
        np.asarray(ids, dtype=np.int64),
        np.asarray(roles, dtype=np.uint8),
        np.asarray(char_lens, dtype=np.int64),
        np.asarray(node_starts, dtype=np.int64),
    )


def filter_by_length(
    docs: Sequence[TokenizedDoc], min_tokens: int = 2000, max_tokens: int = 12000
) -> List[TokenizedDoc]:
    """Keep documents whose token count lies in [min_tokens, max_tokens],
    preserving order. Defaults mirror the full-scale outlier filter."""
    if min_tokens > max_tokens:
        raise ValueError("min_tokens must not exceed max_tokens")
    return [d for d in docs if min_tokens <= len(d) <= max_tokens]


def chunk_doc(doc: TokenizedDoc, max_len: int) -> List[TokenizedDoc]:
    """Split a document into chunks of at most max_len tokens, cutting at
    node starts where possible so every chunk keeps its own headers."""
    n = len(doc)
    if n <= max_len:
        return [doc]
    boundaries = [int(p) for p in doc.node_starts if 0 < int(p) < n]
    boundaries = [0] + boundaries + [n]
    chunks: List[TokenizedDoc] = []
    start = 0
    bi = 1
    while start < n:
        # furthest segment boundary within reach, else a hard cut
        stop = start
        while bi < len(boundaries) and boundaries[bi] - start <= max_len:
            stop = boundaries[bi]
            bi += 1
        if stop <= start:
            stop = min(start + max_len, n)
            while bi < len(boundaries) and boundaries[bi] <= stop:
                bi += 1
        chunks.append(doc.slice(start, stop, suffix=f"#{len(chunks)}"))
        start = stop
    return chunks


@dataclass
class MlmBatch:
    """Masked inputs with recovery labels; LABEL_IGNORE marks unmasked
    positions. global_mask is 1 exactly at HEADER tokens."""

    input_ids: np.ndarray  # int64 (B, n)
    labels: np.ndarray  # int64 (B, n)
    global_mask: np.ndarray  # uint8 (B, n)
    rng_seed: int


def mask_for_mlm(doc: TokenizedDoc, mask_rate: float, seed: int, vocab_size: int) -> MlmBatch:
    """Independently select each position with probability mask_rate; of the
    selected, 80% become MASK, 10% a uniform random non-reserved id, 10%
    stay unchanged. Deterministic for a fixed (doc, seed)."""
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError("mask_rate must lie in [0, 1]")
    n = len(doc)
    rng = np.random.default_rng(seed)
    select = rng.random(n) < mask_rate
    branch = rng.random(n)
    random_ids = rng.integers(N_RESERVED, vocab_size, size=n, dtype=np.int64)

    input_ids = doc.ids.copy()
    labels = np.full(n, LABEL_IGNORE, dtype=np.int64)
    labels[select] = doc.ids[select]
    use_mask = select & (branch < 0.8)
    use_random = select & (branch >= 0.8) & (branch < 0.9)
    input_ids[use_mask] = MASK
    input_ids[use_random] = random_ids[use_random]
    global_mask = (doc.roles == HEADER).astype(np.uint8)
    return MlmBatch(input_ids[None, :], labels[None, :], global_mask[None, :], seed)


# ---------------------------------------------------------------------------
# Tokenized shard files
# ---------------------------------------------------------------------------


def write_token_shards(
    docs: Sequence[TokenizedDoc], out_dir: Union[str, Path], shard_size: int = 10
) -> List[Path]:
    """JSONL shards, one record per document:
    {doc_id, ids, roles, char_lens, node_starts}, roles 0=BODY 1=HEADER."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(0, len(docs), shard_size):
        lines = []
        for d in docs[k : k + shard_size]:
            rec = {
                "doc_id": d.doc_id,
                "ids": d.ids.tolist(),
                "roles": d.roles.tolist(),
                "char_lens": d.char_lens.tolist(),
                "node_starts": d.node_starts.tolist(),
            }
            lines.append(json.dumps(rec, ensure_ascii=False, separators=(",", ":")))
        path = out_dir / f"tokens-{k // shard_size:04d}.jsonl"
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
        paths.append(path)
    return paths


def read_token_docs(directory: Union[str, Path]) -> List[TokenizedDoc]:
    directory = Path(directory)
    docs: List[TokenizedDoc] = []
    for path in sorted(directory.glob("tokens-*.jsonl")):
        with path.open("r", encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    docs.append(
                        TokenizedDoc(
                            rec["doc_id"],
                            np.asarray(rec["ids"], dtype=np.int64),
                            np.asarray(rec["roles"], dtype=np.uint8),
                            np.asarray(rec["char_lens"], dtype=np.int64),
                            np.asarray(rec.get("node_starts", [0]), dtype=np.int64),
                        )
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise FormatError(f"{path.name} record {i}: {exc}") from exc
    return docs


# ---------------------------------------------------------------------------
# Synthetic header-correlated corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeywordAnnotation:
    """Token positions of one heading and its nearby topical keywords."""

    doc_id: str
    header_positions: Tuple[int, ...]
    keyword_positions: Tuple[int, ...]


@dataclass
class SyntheticCorpus:
    trees: List[DocumentTree]
    keyword_positions: Dict[str, List[int]]  # ground truth per doc_id
    header_positions: Dict[str, List[int]]
    topic_words: List[str]
    topic_pools: List[List[str]]
    background_pool: List[str]


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _pseudo_words(rng: np.random.Generator, count: int, taken: set) -> List[str]:
    words = []
    while len(words) < count:
        length = int(rng.integers(3, 10))
        w = "".join(_LETTERS[i] for i in rng.integers(0, len(_LETTERS), size=length))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _zipf_weights(k: int, exponent: float = 1.5) -> np.ndarray:
    w = 1.0 / np.arange(1, k + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def generate_synthetic_corpus(
    n_docs: int,
    n_topics: int,
    words_per_doc: int,
    correlation: float,
    seed: int,
    keywords_per_topic: int = 10,
    background_words: int = 400,
    section_len: int = 48,
    doc_prefix: str = "synth",
    doc_seed_offset: int = 0,
) -> SyntheticCorpus:
    """Documents whose section headings name a topic and whose body words
    come from that topic's keyword pool with probability `correlation`,
    otherwise from a shared background pool.

    All topic pools share one keyword inventory; each topic orders it by its
    own seeded permutation and draws Zipf-weighted ranks over that ordering.
    The heading word therefore determines a section's keyword distribution
    outright, while recovering it from a window of samples requires
    inference, which is what gives header tokens their value. Keyword and
    header token positions (in tokenize_tree flattening order) are recorded
    as ground truth. Per-document seeds are seed + doc index, so generation
    is order-independent.
    """
    if n_topics < 2:
        raise ValueError("n_topics must be at least 2")
    if not 0.0 <= correlation <= 1.0:
        raise ValueError("correlation must lie in [0, 1]")
    inventory_rng = np.random.default_rng(seed)
    taken: set = set()
    topic_words = _pseudo_words(inventory_rng, n_topics, taken)
    inventory = _pseudo_words(inventory_rng, keywords_per_topic, taken)
    topic_pools = [
        [inventory[int(r)] for r in inventory_rng.permutation(keywords_per_topic)]
        for _ in range(n_topics)
    ]
    background_pool = _pseudo_words(inventory_rng, background_words, taken)
    title_pool = _pseudo_words(inventory_rng, 8, taken)
    pool_w = _zipf_weights(keywords_per_topic)
    bg_w = _zipf_weights(background_words)

    trees: List[DocumentTree] = []
    keyword_positions: Dict[str, List[int]] = {}
    header_positions: Dict[str, List[int]] = {}
    for i in range(n_docs):
        rng = np.random.default_rng(seed + doc_seed_offset + i)
        doc_id = f"{doc_prefix}-{i:05d}"
        root = DocNode(NodeKind.TITLE, heading=[StyledWord(title_pool[int(rng.integers(0, len(title_pool)))])])
        kw_pos: List[int] = []
        hd_pos: List[int] = [0]  # title word
        pos = 1
        remaining = words_per_doc
        while remaining > 0:
            body_len = min(section_len, remaining)
            remaining -= body_len
            topic = int(rng.integers(0, n_topics))
            section = DocNode(NodeKind.SECTION, heading=[StyledWord(topic_words[topic], bold=True)])
            hd_pos.append(pos)
            pos += 1
            in_topic = rng.random(body_len) < correlation
            topical = rng.choice(keywords_per_topic, size=body_len, p=pool_w)
            background = rng.choice(background_words, size=body_len, p=bg_w)
            words = []
            for j in range(body_len):
                if in_topic[j]:
                    words.append(StyledWord(topic_pools[topic][int(topical[j])]))
                    kw_pos.append(pos)
                else:
                    words.append(StyledWord(background_pool[int(background[j])]))
                pos += 1
            section.children.append(DocNode(NodeKind.PARAGRAPH, body=words))
            root.children.append(section)
        trees.append(DocumentTree(doc_id, root))
        keyword_positions[doc_id] = kw_pos
        header_positions[doc_id] = hd_pos
    return SyntheticCorpus(trees, keyword_positions, header_positions, topic_words, topic_pools, background_pool)


def analysis_annotations(corpus: SyntheticCorpus, max_distance: int) -> List[KeywordAnnotation]:
    """One annotation record per section heading, pairing it with the
    ground-truth keywords no farther than max_distance tokens away. Pairs
    are therefore valid under both global and window-only patterns, which
    keeps twin reports comparable. The document title (position 0) is not
    annotated; the analysis set pairs section headings with their nearby
    sentences."""
    records: List[KeywordAnnotation] = []
    for tree in corpus.trees:
        doc_id = tree.doc_id
        kw = corpus.keyword_positions[doc_id]
        for h in corpus.header_positions[doc_id]:
            if h == 0:
                continue
            near = tuple(p for p in kw if 0 < abs(p - h) <= max_distance)
            if near:
                records.append(KeywordAnnotation(doc_id, (h,), near))
    return records


def write_annotations(records: Sequence[KeywordAnnotation], path: Union[str, Path]) -> None:
    lines = [
        json.dumps(
            {
                "doc_id": r.doc_id,
                "header_positions": list(r.header_positions),
                "keyword_positions": list(r.keyword_positions),
            },
            separators=(",", ":"),
        )
        for r in records
    ]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_annotations(path: Union[str, Path]) -> List[KeywordAnnotation]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                records.append(
                    KeywordAnnotation(
                        rec["doc_id"],
                        tuple(int(p) for p in rec["header_positions"]),
                        tuple(int(p) for p in rec["keyword_positions"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path} record {i}: {exc}") from exc
    return records
