"""Test suite for ltpeft."""
