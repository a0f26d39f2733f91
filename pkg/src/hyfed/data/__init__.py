"""Bundled data files: person-name lexicon and the fixture corpus."""
