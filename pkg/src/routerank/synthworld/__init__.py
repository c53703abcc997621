"""Synthetic road network, user population and navigation logs."""

from routerank.synthworld.network import Link, RoadGraph, from_segments, generate_network

__all__ = ["Link", "RoadGraph", "from_segments", "generate_network"]
