"""
Locex Test Suite
"""
