"""opcvault: desk-scale confidential OPC.

A hub-and-spoke optical proximity correction engine whose data is protected
at rest (chunked authenticated encryption with sealed keys), in motion
(mutually authenticated encrypted worker channels), and whose security
configurations are benchmarked with baseline-normalized overheads.
"""

__version__ = "0.1.0"
