"""Conversational sketch authoring: layout proposal and stroke generation."""

__version__ = "0.1.0"
