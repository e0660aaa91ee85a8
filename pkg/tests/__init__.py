"""Test suite for madiff."""
