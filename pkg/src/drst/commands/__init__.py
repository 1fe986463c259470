"""
Command modules for the drst CLI

This package contains the implementation of every pipeline stage and the
command functions that the drst CLI dispatches to.
"""
