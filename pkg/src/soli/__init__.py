"""Siamese contrastive fine-tuning of image-captioning models for low-resolution inputs."""

__version__ = "0.1.0"
