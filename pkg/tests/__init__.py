# Tests for Aegis
