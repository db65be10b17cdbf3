"""Neural SDF and radiance field mapping from posed images and LiDAR scans."""

__all__ = []
