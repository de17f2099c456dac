"""Small-scale ELECTRA/DeBERTa pretraining and GLUE benchmarking on numpy."""

__version__ = "0.1.0"
