#!/usr/bin/env python
"""Entry point for prime-traffic."""

from prime_traffic.__main__ import main

if __name__ == "__main__":
    main()
