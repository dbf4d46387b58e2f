"""Aboveground-biomass mapping from airborne LiDAR: canopy metrics, plot
selection with growth adjustment, a stacked three-learner ensemble,
area-of-applicability masking, raster mosaicking, and a multi-scale
map-agreement assessment battery, plus a deterministic synthetic-scene
generator for end-to-end testing."""

__version__ = "1.0.0"
