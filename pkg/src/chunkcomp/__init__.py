"""Chunked parallel attention with per-chunk KV eviction and global query attention.

Long contexts are cut into chunks that fit the model's trained position
range, each chunk is encoded locally with the query appended, chunks are
ranked by how well they predict the query, per-head KV caches are pruned,
and the query finally attends over the concatenation of what survives.
"""

from .chunker import ChunkPlan, assemble_chunk_input, split_chunks
from .eviction import EvictionPolicy, apply_policy, classify_bias_regions
from .local import ChunkState, encode_chunk
from .model import ModelConfig, ModelWeights, forward_local, init_from_seed
from .pipeline import PipelineResult, PipelineSettings, run_pipeline

__all__ = [
    "ChunkPlan",
    "ChunkState",
    "EvictionPolicy",
    "ModelConfig",
    "ModelWeights",
    "PipelineResult",
    "PipelineSettings",
    "apply_policy",
    "assemble_chunk_input",
    "classify_bias_regions",
    "encode_chunk",
    "forward_local",
    "init_from_seed",
    "run_pipeline",
    "split_chunks",
]
