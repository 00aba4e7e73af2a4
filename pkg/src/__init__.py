"""
DroneFuse - Radar + Acoustic Drone Detection and Classification
"""
__version__ = "1.0.0"
