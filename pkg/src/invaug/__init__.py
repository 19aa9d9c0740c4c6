"""Model inversion attack toolkit: regularized inversion training plus
black-box adversarial augmentation, with an experiment harness."""

__version__ = "0.1.0"
