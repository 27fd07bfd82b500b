"""personakit: clickstream logs -> buyer features -> discrete persona codebook
-> population analytics, with a CLI for reproducible end-to-end runs."""

__version__ = "0.1.0"
