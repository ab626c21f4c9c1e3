"""buglens: automatic taxonomy annotation for LLM-agent bug reports.

Two-stage pipeline: a tool-using investigation loop produces a bug
explanation, then a classification pass maps post + explanation onto six
taxonomy labels with rationales. Ships with an evaluation harness
(macro-F1, Cohen's kappa, match rates, distribution reports) and a CLI.
"""

__version__ = "0.1.0"
