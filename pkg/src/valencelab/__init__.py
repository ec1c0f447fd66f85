"""Desk-scale mobile sensing and emotional-valence prediction laboratory.

The package simulates a cohort of synthetic humans carrying a duty-cycled
sensing agent, syncs their data over a faulty transport to a cloud-side
store, and runs a per-entity AutoML pipeline (density clustering, Bayesian
hyperparameter tuning, four estimators) ending in a weighted-F1 / MCC
comparison report.
"""

__version__ = "0.1.0"
