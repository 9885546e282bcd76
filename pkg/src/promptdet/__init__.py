"""Prompt-driven pseudo-labelling for open-vocabulary detection, at desk scale.

A toy contrastive vision-language model is pretrained on synthetic captioned
scenes, adapted to dense pixel-text alignment with learnable text and visual
prompts, and then used to pseudo-label novel categories. A two-stage detector
is self-trained on base boxes plus those pseudo labels.

Modules
-------
synthdata   synthetic scenes, category sets and on-disk datasets
vlm         toy encoders, contrastive pretraining, dense score maps
prompts     learnable text and visual prompt modules
adapt       dense alignment loss and the prompt adaptation loop
pseudolabel connected regions, proposals and pseudo-label generation
detector    embedding-classifier detector and self-training
metrics     box AP/mAP and dense mIoU
pipeline    artifact-producing stages; ``cli`` exposes them as ``promptdet``
"""

from .adapt import PromptAdapter
from .detector import OpenVocabDetector
from .exceptions import (ConfigurationError, InputError, LayoutError, ShapeError,
                         TrainingDivergenceError)
from .vlm import ToyVLM

__version__ = "0.1.0"

__all__ = ["ToyVLM", "PromptAdapter", "OpenVocabDetector", "ConfigurationError", "InputError",
           "LayoutError", "ShapeError", "TrainingDivergenceError", "__version__"]
