"""Tests for psigan."""
