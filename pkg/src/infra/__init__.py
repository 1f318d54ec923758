"""
Infrastructure: logging sinks, in-process transport, rank launcher, surface geometry, VTK export
"""
