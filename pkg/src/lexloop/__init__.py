"""lexloop: human-in-the-loop lexicon expansion, comment labeling, and
engagement-shift analysis for threaded discussion corpora."""

__version__ = "0.1.0"
