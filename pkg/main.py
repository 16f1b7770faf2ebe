"""
RegCD - Main Entry Point
"""
import sys

from src.user_interaction.cli import main


if __name__ == "__main__":
    sys.exit(main())
