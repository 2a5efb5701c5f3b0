"""VNS-GRU caption decoder toolkit."""
