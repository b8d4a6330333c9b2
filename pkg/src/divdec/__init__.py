"""divdec: a desk-scale laboratory for safe diversity in concept-to-text
generation.

Subsystems:
  numkit          minimal double-precision numeric core (params, Adam, clipping,
                  gradient checking, checkpoints)
  corpus          synthetic concept-to-text corpus, vocab/MR encoding,
                  decomposed-attribute reference index
  generator       semantically conditioned recurrent generator + auxiliary LM
  expert          dynamic oracle labelling safe next-words via forced rollouts
  metaclassifier  feed-forward safe/unsafe classifier over decoding states
  decoding        greedy/beam/top-k/nucleus/MMI/safe-prefix decoding + reranker
  imitation       Exact Imitation / DAgger / LOLS training loops
  metrics         BLEU-4, Self-BLEU, distinct-n, slot error rate
  cli             experiment harness (pipelines, sweeps, reports)
"""

__version__ = "0.1.0"
