"""Unit tests for services.""" 