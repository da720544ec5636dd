"""Desk-scale LightMDETR."""
