"""Block-diffusion training layout and decoding engine at desk scale."""

from .decode import DecodeConfig, DecodeTrace, ar_greedy, mdm_decode, spec_linear, spec_quadratic
from .kvcache import KvCache
from .masks import MaskMatrix, build_dual_stream, training_mask
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .sequence import CorpusConfig, Role, SequenceLayout, generate_corpus, partition_blocks
from .train import AnnealSchedule, TrainConfig, anneal_block_size, train_loop

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule", "CorpusConfig", "DecodeConfig", "DecodeTrace", "KvCache", "MaskMatrix",
    "ModelConfig", "ModelParams", "Role", "SequenceLayout", "TrainConfig", "anneal_block_size",
    "ar_greedy", "build_dual_stream", "forward", "generate_corpus", "init_params",
    "load_checkpoint", "mdm_decode", "partition_blocks", "save_checkpoint", "spec_linear",
    "spec_quadratic", "train_loop", "training_mask",
]
