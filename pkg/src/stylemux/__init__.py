"""stylemux: multilingual neural machine translation with factored zero-shot style transfer."""

__version__ = "0.1.0"
