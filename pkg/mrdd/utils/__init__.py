"""Reporting helpers for MRDD runs."""
