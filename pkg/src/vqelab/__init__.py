"""Desk-scale vision-language lab: autograd, mini VLM, LoRA, three-stage training, metrics."""

__version__ = "0.1.0"
