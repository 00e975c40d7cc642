"""specfuse: multisensor hierarchical transformer with JEPA-style pretraining
on synthetic Earth-observation scenes, plus a corpus-construction simulator."""

__version__ = "0.1.0"
