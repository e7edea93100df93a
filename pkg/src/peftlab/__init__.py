"""Desk-scale parameter-efficient fine-tuning lab: a frozen-encoder VQA model
and a LoRA-adapted diffusion generator on a numpy autodiff core."""

__version__ = "0.1.0"
