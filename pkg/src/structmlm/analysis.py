"""Header/keyword attention measurement and heatmap export.

Attention weights are averaged over heads first, then over all annotated
(header, keyword) pairs that the checkpoint's own attention pattern allows.
Pairs outside the pattern are excluded, never zero-averaged: under the
vanilla policy a keyword beyond the window simply contributes no pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .corpus import HEADER, KeywordAnnotation, TokenizedDoc, Vocabulary
from .docfile import atomic_write_bytes
from .encoder import AttentionPattern, _forward_cached
from .errors import MismatchedReportsError, NoValidPairsError, RangeOutOfBoundsError
from .training import Checkpoint

LAST = "last"


@dataclass(frozen=True)
class AttentionReport:
    model_id: str
    layer: int
    header_to_keyword: float
    keyword_to_header: float
    n_pairs: int

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "layer": self.layer,
            "header_to_keyword": self.header_to_keyword,
            "keyword_to_header": self.keyword_to_header,
            "n_pairs": self.n_pairs,
        }


def resolve_layer(layer: Union[int, str], n_layers: int) -> int:
    if layer == LAST:
        return n_layers - 1
    layer = int(layer)
    if not 0 <= layer < n_layers:
        raise ValueError(f"layer {layer} out of range for {n_layers}-layer model")
    return layer


def _checkpoint_global_mask(checkpoint: Checkpoint, doc: TokenizedDoc) -> np.ndarray:
    if checkpoint.global_attention_enabled:
        return (doc.roles == HEADER).astype(np.uint8)
    return np.zeros(len(doc), dtype=np.uint8)


def _validate_annotation(ann: KeywordAnnotation, n: int) -> None:
    positions = list(ann.header_positions) + list(ann.keyword_positions)
    if any(p < 0 or p >= n for p in positions):
        raise ValueError(f"annotation for {ann.doc_id!r} has out-of-range positions")
    if set(ann.header_positions) & set(ann.keyword_positions):
        raise ValueError(f"annotation for {ann.doc_id!r} mixes header and keyword positions")


def header_keyword_attention(
    checkpoint: Checkpoint,
    docs: Sequence[TokenizedDoc],
    annotations: Sequence[KeywordAnnotation],
    layer: Union[int, str] = LAST,
) -> AttentionReport:
    """Mean head-averaged attention between annotated headers and keywords,
    in both directions, at one layer (default last). The forward pass uses
    the checkpoint's own global-mask policy. Raises NoValidPairsError when
    the pattern allows none of the annotated pairs."""
    layer_idx = resolve_layer(layer, checkpoint.params.config.n_layers)
    by_id: Dict[str, TokenizedDoc] = {d.doc_id: d for d in docs}
    h2k_sum = 0.0
    k2h_sum = 0.0
    n_pairs = 0
    for doc_id in sorted({a.doc_id for a in annotations}):  # merge order fixed by doc_id
        doc = by_id.get(doc_id)
        if doc is None:
            raise ValueError(f"annotation references unknown document {doc_id!r}")
        gmask = _checkpoint_global_mask(checkpoint, doc)
        pattern = AttentionPattern.from_global_mask(gmask, checkpoint.params.config.window)
        _, _, trace = _forward_cached(checkpoint.params, doc.ids, gmask, want_trace=True)
        mean_w = trace.layers[layer_idx].mean_heads()
        for ann in (a for a in annotations if a.doc_id == doc_id):
            _validate_annotation(ann, len(doc))
            for h in ann.header_positions:
                for kw in ann.keyword_positions:
                    if not pattern.allows(h, kw):
                        continue
                    h2k_sum += mean_w[h, kw]
                    k2h_sum += mean_w[kw, h]
                    n_pairs += 1
    if n_pairs == 0:
        raise NoValidPairsError("every annotated header/keyword pair is disallowed by the pattern")
    return AttentionReport(checkpoint.model_id, layer_idx, h2k_sum / n_pairs, k2h_sum / n_pairs, n_pairs)


def compare_reports(a: AttentionReport, b: AttentionReport) -> Dict[str, float]:
    """Relative change (a - b) / b per direction. Reports must come from the
    same layer and the same annotation set."""
    if a.layer != b.layer or a.n_pairs != b.n_pairs:
        raise MismatchedReportsError(
            f"reports not comparable: layer {a.layer} vs {b.layer}, n_pairs {a.n_pairs} vs {b.n_pairs}"
        )
    return {
        "header_to_keyword": (a.header_to_keyword - b.header_to_keyword) / b.header_to_keyword,
        "keyword_to_header": (a.keyword_to_header - b.keyword_to_header) / b.keyword_to_header,
    }


def export_heatmap(
    checkpoint: Checkpoint,
    doc: TokenizedDoc,
    vocab: Vocabulary,
    layer: Union[int, str],
    start: int,
    stop: int,
) -> Tuple[List[str], np.ndarray]:
    """Head-averaged attention submatrix over token positions [start, stop),
    with token strings as labels. Rows keep their global normalization, so a
    row sums to 1 only when its whole allowed set lies inside the range;
    disallowed pairs are exactly zero."""
    n = len(doc)
    if not (0 <= start < stop <= n):
        raise RangeOutOfBoundsError(f"range [{start}, {stop}) invalid for document of {n} tokens")
    layer_idx = resolve_layer(layer, checkpoint.params.config.n_layers)
    gmask = _checkpoint_global_mask(checkpoint, doc)
    _, _, trace = _forward_cached(checkpoint.params, doc.ids, gmask, want_trace=True)
    mean_w = trace.layers[layer_idx].mean_heads()
    labels = [vocab.token_of(int(t)) for t in doc.ids[start:stop]]
    return labels, mean_w[start:stop, start:stop]


def heatmap_csv(labels: Sequence[str], matrix: np.ndarray) -> str:
    """CSV with a header row/column of token strings."""
    def esc(s: str) -> str:
        return '"' + s.replace('"', '""') + '"' if ("," in s or '"' in s) else s

    rows = ["," + ",".join(esc(l) for l in labels)]
    for label, row in zip(labels, matrix):
        rows.append(esc(label) + "," + ",".join(f"{v:.17g}" for v in row))
    return "\n".join(rows) + "\n"


def write_report(path: Union[str, Path], report: AttentionReport) -> None:
    atomic_write_bytes(path, (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8"))


def read_report(path: Union[str, Path]) -> AttentionReport:
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    return AttentionReport(
        rec["model_id"],
        int(rec["layer"]),
        float(rec["header_to_keyword"]),
        float(rec["keyword_to_header"]),
        int(rec["n_pairs"]),
    )
