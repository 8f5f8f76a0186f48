import sys

from zoorun.engine_worker import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:], framework="reference", version="1.0.0"))
