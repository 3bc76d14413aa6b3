"""Command-line front end, reports and the man-in-the-middle harness."""
