"""
CT phishing detection: watch Certificate Transparency logs, build labeled
certificate datasets from phishing feeds, train and run certificate
classifiers, and evaluate them at fixed false-positive rates.
"""

__version__ = "0.1.0"
