"""mvmark: trigger-set watermarking of classifiers with multi-view sample
selection, an attack simulation suite, and statistical ownership verification."""

__version__ = "0.1.0"
