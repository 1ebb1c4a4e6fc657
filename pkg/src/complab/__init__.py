"""Pseudo-label domain adaptation on embedding features.

Submodules (import what you need; this package root stays import-light so
the CLI can apply COMPLAB_THREADS before numpy loads):

    embedding_store    memory bank with momentum updates and exact cosine k-NN
    neighbor_predictor reliable-neighbor prediction (threshold or learned)
    group_builder      DBSCAN size cap + common-neighbor transitive merging
    losses             loss terms of the joint objective, analytic gradients
    trainer            staged joint training loop, checkpoints
    synthgen           synthetic source/target domain generator
    evalkit            retrieval metrics (CMC/mAP) and pseudo-label quality
    dataio             dataset file formats
    report             JSON/CSV reports and matplotlib figures
    cli                command-line entry point
"""

__version__ = "0.1.0"

__all__ = [
    "embedding_store",
    "neighbor_predictor",
    "group_builder",
    "losses",
    "trainer",
    "synthgen",
    "evalkit",
    "dataio",
    "report",
    "cli",
    "errors",
    "optim",
]
