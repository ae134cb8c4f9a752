"""Separable permutations under a bracketing transduction grammar.

Exact marginal, MAP and sampling inference over BTG derivations, a small
reverse-mode tape for training through them, and a reorder-then-tag model
with an arithmetic infix-to-postfix benchmark.
"""

__version__ = "0.1.0"
