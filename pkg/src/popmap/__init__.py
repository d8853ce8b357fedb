"""Dynamic population downscaling: stacked SRCNN spatial mapping plus
time-embedded LSTM temporal smoothing, with classical baselines."""

__version__ = "0.1.0"
