"""End-to-end tests for genscl."""
