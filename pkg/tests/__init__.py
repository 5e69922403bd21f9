"""Test package for scrl-st."""
