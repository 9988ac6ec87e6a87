"""sqlseq: a from-scratch seq2seq toolkit for parsing questions over a single
table into linearized SQL, with five LSTM model variants and an encoder probe.
"""

__version__ = "0.1.0"
