"""Visual place recognition with pairwise homography warping and dense re-ranking."""

__version__ = "0.1.0"
