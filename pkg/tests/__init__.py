"""Test suite for waterwas."""
