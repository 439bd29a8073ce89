"""voxtag: a desk-scale toolkit for studying speaker-gender control in
speech translation via tag conditioning, gradient reversal and pitch/formant
manipulation of training audio."""

__version__ = "0.1.0"
