"""Streaming memory encoding with adaptive memory selection for long-video QA.

Long synthetic feature streams are segmented into clips and iteratively
condensed into fixed-length memories by a small decoder-only transformer;
a question-conditioned selector picks a constant number of memories for a
toy reader LM to answer from, with grounding labels available throughout.
"""

from . import autograd
from .autograd import Adam, NonFiniteError, Tensor, no_grad
from .clip_encoder import (MlpProjector, PrefixMaskSpec, build_prefix_mask,
                           encode_clip, init_summarization, merge_adjacent_tokens)
from .config import ConfigError, RunConfig, load_config, parse_config_text, \
    serialize_config, validate_config
from .lm import AttentionMask, LmConfig, MiniLm, PackedSequence, Segment, \
    build_causal_mask
from .pipeline import AnswerResult, VideoQaModel, answer, eval_grounding, \
    train_stage1, train_stage2
from .selector import SelectionResult, assemble, gumbel_topk, \
    instruction_indicator, selection_kl_loss, similarity
from .streaming import MemoryBank, MemoryEntry, VideoStream, encode_step, \
    encode_video, format_time_prompt, load_bank, save_bank, segment_video
from .synthdata import EventPlan, QASample, SymbolBook, SynthDataset, \
    build_dataset, concat_videos, gen_qa, gen_video, read_dataset, validate_qa, \
    write_dataset
from .tokenizer import Vocab

__version__ = "0.1.0"
