#!/usr/bin/env python3
"""
Entry script for averaging experiments

    python scripts/run_experiment.py optimize --config experiments/median.json --out out/median
"""

import logging
import os
import sys

# Make the averaging package importable when run as a script
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from averaging.cli import main

logging.basicConfig(
    level=os.environ.get('AVERAGING_LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


if __name__ == '__main__':
    try:
        sys.exit(main())
    except Exception as e:
        logger.error(f"Error during experiment: {e}", exc_info=True)
        sys.exit(1)
