"""Structure-aware MLM pre-training at desk scale.

Extract hierarchical structure from LaTeX sources, pre-train a
sliding-window + global-token sparse-attention encoder with header tokens
marked global, and quantify the attention shift between headers and
keywords against a vanilla-pretrained twin.
"""

from .analysis import AttentionReport, compare_reports, export_heatmap, header_keyword_attention
from .corpus import (
    KeywordAnnotation,
    MlmBatch,
    TokenizedDoc,
    Vocabulary,
    build_vocab,
    filter_by_length,
    generate_synthetic_corpus,
    mask_for_mlm,
    tokenize_tree,
)
from .docfile import decode_document, encode_document
from .encoder import (
    AttentionPattern,
    ModelConfig,
    Parameters,
    backward,
    dense_reference_attention,
    forward,
    init_parameters,
    mlm_loss,
    pair_count,
    sparse_attention,
)
from .latex import CorpusStats, DocNode, DocumentTree, NodeKind, StyledWord, corpus_stats, extract_tree, strip_noise
from .training import (
    Checkpoint,
    EvalReport,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
