"""Unique-feature memorisation auditing for image classifiers."""

TOOL_VERSION = "0.1.0"
