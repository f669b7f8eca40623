"""
Test package for DarkPix.
""" 