"""Desk-scale lab for backward-compatible embedding learning with
neighborhood-consensus contrastive losses."""

__version__ = "0.1.0"
