"""Disease phenotyping pipeline for survey data.

Drives an external NER/NEN backend over survey records, verifies its
output with configurable LLM strategies grounded in an ontology retrieval
store, and scores everything against human ground truth.
"""

__version__ = "0.1.0"
