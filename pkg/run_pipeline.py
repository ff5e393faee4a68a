import logging
import os
import sys

from dotenv import load_dotenv

from pipeline_cli import main

if __name__ == '__main__':
    load_dotenv()
    logging.basicConfig(
        level=os.getenv('LOG_LEVEL', 'INFO').upper(),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    sys.exit(main())
