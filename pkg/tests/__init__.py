"""
Test suite for echoinr
"""
