"""Meta-learned conversational recommender: corpus, training, metrics and chat service."""

from ._core import (
    ChatService,
    EnvironmentError,
    InputError,
    ServiceError,
    bleu,
    clip_elementwise,
    default_config,
    distinct_n,
    evaluate,
    hit_rate,
    inner_adapt,
    mrr,
    ndcg,
    prepare,
    set_log_level,
    synthetic_corpus,
    token_f1,
    train,
)

__all__ = [
    "ChatService",
    "EnvironmentError",
    "InputError",
    "ServiceError",
    "bleu",
    "clip_elementwise",
    "default_config",
    "distinct_n",
    "evaluate",
    "hit_rate",
    "inner_adapt",
    "mrr",
    "ndcg",
    "prepare",
    "set_log_level",
    "synthetic_corpus",
    "token_f1",
    "train",
]
