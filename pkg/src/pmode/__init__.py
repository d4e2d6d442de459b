"""PMODE: prototype-mask instance segmentation with metric dimension regression
for quadrilateral signage, plus the synthetic pinhole-scene oracle used to
train and verify it at desk scale."""

__version__ = "0.1.0"
