"""Self-supervised inertial odometry with LiDAR pseudo-labels."""

__version__ = "0.1.0"
