"""Multi-agent pipeline that solves competitive-programming problems in C++."""

__version__ = "0.1.0"
