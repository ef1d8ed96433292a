"""
Test suite for the offroad planner.
"""
