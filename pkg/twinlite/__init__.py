"""
twinlite: a from-scratch numpy implementation of a lightweight dual-head road
segmentation network for drivable areas and lane lines, with its training loop,
metrics, batch-norm fusion and a command-line tool.
"""
