"""Toolkit for interpolating and evaluating groundwater storage anomalies.

Point well series are curated (segmentation, gap filling, storage conversion,
baseline anomalies), modelled from gridded predictors, interpolated by ordinary
kriging and scored under spatial holdout plus expanding-window temporal CV.
"""
__version__ = "0.1.0"
