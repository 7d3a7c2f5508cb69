"""Transformer translation with parallel encoder branches (APA, ACPA, AAPA)."""
from .attention import AttentionMask, make_causal_mask, make_padding_mask, multi_head_attention, \
    scaled_dot_product_attention
from .data import Vocabulary, batch_iter, build_vocab, load_parallel_tsv, make_synthetic_task
from .estimator import ParallelAttentionTranslator
from .metrics import BleuScore, corpus_bleu, modified_ngram_precision
from .model import AttentionDump, ModelConfig, TransformerModel, parameter_count
from .parallel import CriticalPathReport, EncoderTopology, Variant, critical_path
from .tensor import Tensor, backward, no_grad
from .training import (AdamState, TrainConfig, TrainReport, adam_step, greedy_decode, kl_div_loss,
                       load_checkpoint, save_checkpoint, train)

__version__ = "0.1.0"
