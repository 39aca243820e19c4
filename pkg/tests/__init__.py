"""Tests for pyphantomrl."""
