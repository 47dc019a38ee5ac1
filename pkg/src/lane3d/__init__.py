"""3D lane detection toolkit: camera geometry, anchors, a small BEV transformer,
losses, LiDAR-assisted label generation and 3D/2D evaluation."""
__version__ = "0.1.0"
