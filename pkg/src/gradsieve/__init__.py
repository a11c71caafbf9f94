"""gradsieve: desk-scale bilevel data selection.

Learns a weighting distribution over a large generic dataset so that a main
model trained on the reweighted data minimizes loss on a small specific
dataset. Ships the online bilevel loop with three gradient-based outer
updates (DDS, SOBA, Anograd), the usual baselines (fine-tuning, mixing, CDS,
domain classifier, LTR, MetaWeightNet), gradient-alignment diagnostics, and a
closed-form quadratic oracle for exact verification.
"""

__version__ = "0.1.0"
