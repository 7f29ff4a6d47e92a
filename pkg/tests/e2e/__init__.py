# End-to-end tests