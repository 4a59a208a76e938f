from .helpers import calculate_content_hash, calculate_file_hash, seed_stream, torch_generator
from .validators import validate_fraction, validate_probability, validate_top_k

__all__ = [
    'calculate_content_hash',
    'calculate_file_hash',
    'seed_stream',
    'torch_generator',
    'validate_fraction',
    'validate_probability',
    'validate_top_k'
]
