from .container import (
    CompressedKvBlock,
    DequantStats,
    dequantize,
    pack_block,
    unpack_block,
)
from .levels import (
    ChannelQuantState,
    QuantLevel,
    QuPhase,
    QuScheduler,
    cm_observe,
    finalize_prefill,
    level_params,
    mmf_update,
    nzq_quantize,
    round_half_away,
)
from .overhead import gpcq_fake_quant, requant_ops_oracle, scheme_overhead
from .stream import CompressedTrace, StreamCompressor, compress_stream, compress_trace

__all__ = [
    "ChannelQuantState",
    "CompressedKvBlock",
    "CompressedTrace",
    "DequantStats",
    "QuPhase",
    "QuScheduler",
    "QuantLevel",
    "StreamCompressor",
    "cm_observe",
    "compress_stream",
    "compress_trace",
    "dequantize",
    "finalize_prefill",
    "gpcq_fake_quant",
    "level_params",
    "mmf_update",
    "nzq_quantize",
    "pack_block",
    "requant_ops_oracle",
    "round_half_away",
    "scheme_overhead",
    "unpack_block",
]
