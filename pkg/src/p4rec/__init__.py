"""Personalized recommendation language model fine-tuned with reinforcement learning from AI feedback."""

__version__ = "0.1.0"
