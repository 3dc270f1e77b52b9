"""Desk-scale workbench for bilingual language-model training under
controlled exposure schedules, with crosslinguistic-influence evaluation
and mechanistic probes."""

__version__ = "0.1.0"
