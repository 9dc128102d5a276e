"""subcast: ensemble post-processing and ML pipeline for gridded
subseasonal forecasts at desk scale."""

__version__ = "0.1.0"
