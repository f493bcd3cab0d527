"""
ICSWatch - Passive analysis of industrial control system traffic in sampled IXP data.
"""

from .pipeline import VERSION, IcsWatchPipeline, RunConfig
from .registry import DEFAULT_REGISTRY, ProtocolId, ProtocolRegistry
from .model import HostId, SampledPacket, Transport
from .anonymize import AsMap, Pseudonymizer
from .ingest import FrameDecoder, SflowIngestor
from .dissectors import dissect_payload
from .it_recognizer import ItRecognizer
from .classifier import Classifier, PipelineAccounting
from .sampling_model import SamplingModel, monte_carlo_detection
from .baseline import compare, import_baseline
from .intel import IntelStore
from .flows import aggregate, breakdown
from .synth import TrafficProfile, SamplerConfig, generate, sample, validate_end_to_end
from .reports import emit_report
from .heatmap import CountryHeatmap

__version__ = VERSION
__all__ = [
    'IcsWatchPipeline',
    'RunConfig',
    'DEFAULT_REGISTRY',
    'ProtocolId',
    'ProtocolRegistry',
    'HostId',
    'SampledPacket',
    'Transport',
    'AsMap',
    'Pseudonymizer',
    'FrameDecoder',
    'SflowIngestor',
    'dissect_payload',
    'ItRecognizer',
    'Classifier',
    'PipelineAccounting',
    'SamplingModel',
    'monte_carlo_detection',
    'compare',
    'import_baseline',
    'IntelStore',
    'aggregate',
    'breakdown',
    'TrafficProfile',
    'SamplerConfig',
    'generate',
    'sample',
    'validate_end_to_end',
    'emit_report',
    'CountryHeatmap',
]
