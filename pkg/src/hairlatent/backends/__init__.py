from .ports import FeatureExtractorPort, GeneratorPort, KeypointExtractorPort, Ports, SegmenterPort
from .toy import ToyConfig, make_toy_backend

__all__ = [
    "FeatureExtractorPort",
    "GeneratorPort",
    "KeypointExtractorPort",
    "Ports",
    "SegmenterPort",
    "ToyConfig",
    "make_toy_backend",
]
