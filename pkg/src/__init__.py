"""
Stein-Encoder package.
This module initializes the supervised single-index encoder toolkit and defines the version.
"""

__version__ = '0.1.0'
