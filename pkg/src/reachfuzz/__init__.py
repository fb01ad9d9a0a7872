"""Directed fuzzing orchestrator built around a pluggable text-generation backend.

The pipeline prepares a fuzzing campaign in four stages (static analysis,
retrieval-grounded program usage, seed optimization, mutator synthesis) and
then runs a directed campaign that mixes a bug-specific mutation program with
baseline random mutations.
"""

__version__ = "0.1.0"
