"""flowvo: unsupervised visual odometry built on a self-contained autodiff engine.

Subpackages:
  tensor / nnops   reverse-mode autodiff primitives
  geometry         SE(3) pose algebra, pinhole projection, warp coordinates
  networks         the two pose estimators and the depth network
  losses           self-supervision objectives
  synthscene       deterministic synthetic stereo scene generator
  trainer          two-stage optimization, checkpointing, trajectory inference
  evaluate         odometry drift metrics, ATE, pose file I/O
  cli              command-line entry point
"""

__version__ = "0.1.0"
