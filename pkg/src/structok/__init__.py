"""Visit-aware BPE tokenization, causal-LM pretraining, and linear-probe
evaluation for longitudinal medical-code timelines."""

from . import corpus, downstream, lm, textenc, tokenizer

__all__ = ["corpus", "tokenizer", "lm", "textenc", "downstream"]
__version__ = "0.1.0"
