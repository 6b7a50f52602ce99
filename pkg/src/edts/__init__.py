"""Efficient Dynamic Transaction Storage toolkit.

Subpackages cover the full pipeline: the membership filter that compresses
block bodies (`cuckoo`), fee-driven leaf-space allocation and transaction
selection (`dts`), block build/reconstruct codecs (`codec`), reward and
throughput metrics (`metrics`), the discrete-event network simulator
(`netsim`), the multi-objective strategy optimizer (`moo`), and the command
line front end (`cli`).
"""

__version__ = "0.1.0"
