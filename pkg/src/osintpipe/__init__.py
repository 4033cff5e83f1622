"""Secure open-source-intelligence pipeline for social-media investigation.

Ingests events from CSV datasets and rate-limited REST polling, classifies
them against per-category keyword lexicons, stores them in encrypted
time-bucketed segments with an inverted index, and answers a small
Splunk-style query language over an access-controlled HTTPS API.
"""

__version__ = "0.1.0"
