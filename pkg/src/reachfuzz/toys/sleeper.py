"""sleeper: read the input file, then sleep far longer than any exec timeout."""

import os
import sys
import time


def trace(name):
    path = os.environ.get("RF_TRACE_FILE")
    if path: open(path, "a").write(name + "\n")  # noqa: E701


def main():
    trace("main")
    open(sys.argv[1], "rb").read()
    time.sleep(60)


if __name__ == "__main__":
    main()
