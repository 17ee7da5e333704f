"""Robot piano playing from MIDI scores and fingertip demonstrations."""

__version__ = "0.1.0"
