"""
Rectify-or-reject middleware for multi-agent LLM systems.
"""
