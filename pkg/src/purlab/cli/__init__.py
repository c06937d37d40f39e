"""Command line interface of the laboratory"""
