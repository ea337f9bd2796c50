"""tracegas: dual-task thermal gas monitoring.

Per-frame CO2 plume segmentation and clip-level flux classification from
false-colour thermal video with a co-registered gas intensity channel,
trained end to end with a staged curriculum on a synthetic plume dataset.
"""

__version__ = "0.1.0"
