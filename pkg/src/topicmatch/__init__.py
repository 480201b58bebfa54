"""Topic-model based article/comment matching on synthetic paired corpora."""

from .corpus import (
    BowVector,
    Document,
    SynthConfig,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    to_bow,
    tokenize,
)
from .evaluation import CandidateSet, bleu, cider, rank_metrics, rouge_l
from .nvtm import (
    NvtmParams,
    TrainConfig,
    embed,
    load_checkpoint,
    prior_laplace,
    save_checkpoint,
    train_joint,
    train_unsupervised,
)
from .retrieval import CommentIndex, TfidfIndex, build_index, score, top_k

__version__ = "0.1.0"

__all__ = [
    "BowVector", "CandidateSet", "CommentIndex", "Document", "NvtmParams", "SynthConfig",
    "TfidfIndex", "TrainConfig", "Vocabulary", "bleu", "build_index", "build_vocabulary",
    "cider", "embed", "generate_synthetic_corpus", "load_checkpoint", "prior_laplace",
    "rank_metrics", "rouge_l", "save_checkpoint", "score", "to_bow", "tokenize", "top_k",
    "train_joint", "train_unsupervised",
]
