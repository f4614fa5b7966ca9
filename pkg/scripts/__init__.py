"""TSCD weakly-supervised segmentation toolkit."""
