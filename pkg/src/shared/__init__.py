# Shared utilities and common code
