"""
Sample data tools
"""
