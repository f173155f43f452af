"""Two-stage MRI pipeline: sequence-translation pretraining of a hybrid CNN/transformer
generator, then transfer of its encoder and bottleneck into a tumor classifier."""

__version__ = "0.1.0"
