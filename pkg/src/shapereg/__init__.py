"""Registration and shape completion of noisy, occluded 3D point clouds."""
