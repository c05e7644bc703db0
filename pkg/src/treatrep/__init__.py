"""Contrastive treatment representations for unbiased CATE estimation."""

__version__ = "0.1.0"
