"""Repo-root conftest: puts the repo on sys.path so tests import each
other's fixtures as the tests package."""
