"""Context-encoder pretraining with DICOM-metadata weak labels."""

__version__ = "0.1.0"
