"""Configuration, seeded runners, persistence and the command line."""
