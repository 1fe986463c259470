# This file is intentionally left empty to mark this directory as a Python package.
