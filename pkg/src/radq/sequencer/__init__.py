from .fields import PSI_MAX, PSI_MIN, realize_fields
from .model import (LayerPlan, RadiomicSequence, SequencerModel, forward, forward_batch,
                    load_model, realize, save_model, sequence_batch)
from .ops import avreu, median_pool

__all__ = [
    "PSI_MAX", "PSI_MIN", "realize_fields",
    "LayerPlan", "RadiomicSequence", "SequencerModel", "forward", "forward_batch",
    "load_model", "realize", "save_model", "sequence_batch",
    "avreu", "median_pool",
]
