# Test package for m2map
