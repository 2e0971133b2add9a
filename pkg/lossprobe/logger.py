import logging
import sys

import caseconverter


FMT = 'timestamp=%(asctime)s name=%(name)s level=%(levelname)s msg="%(message)s"'


root_logger = logging.getLogger()
formater = logging.Formatter(FMT)

stdout_handler = logging.StreamHandler(stream=sys.stdout)
stdout_handler.setFormatter(formater)

root_logger.addHandler(stdout_handler)


def child_logger(module: str, name: str | None = None) -> logging.Logger:
    """
    Logger for a module, optionally narrowed to a named object (a cell, a run)
    whose name is rendered in PascalCase
    """
    log = root_logger.getChild(module)
    if name:
        log = log.getChild(caseconverter.pascalcase(name.replace(".", "-")))
    return log
