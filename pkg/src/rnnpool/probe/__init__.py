"""Probing experiments: synthetic datasets, an RNNPool + FC trainer and CIFAR-10 pooling comparison."""
from .datasets import (ANGLES, SHAPES, TASKS, SynthDataset, gen_lines_multiclass,
                       gen_lines_multilabel, gen_shapes_multilabel, generate, read_pgm, write_pgm)
from .train import ProbeModel, ProbeResult, accuracy, loss_and_grads, train_probe

__all__ = ["ANGLES", "SHAPES", "TASKS", "SynthDataset", "gen_lines_multiclass",
           "gen_lines_multilabel", "gen_shapes_multilabel", "generate", "read_pgm", "write_pgm",
           "ProbeModel", "ProbeResult", "accuracy", "loss_and_grads", "train_probe"]
