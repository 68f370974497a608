#!/usr/bin/env python3
"""
Command-line entry point for emotive glyph guided diffusion
"""

if __name__ == "__main__":
    import sys
    from app.main import main

    sys.exit(main(sys.argv[1:]))
