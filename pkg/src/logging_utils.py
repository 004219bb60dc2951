import logging

from pythonjsonlogger.json import JsonFormatter

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def configure_logging(level="INFO", json_path=None):
    """
    Configure the root logger the same way for every entry point

    Parameters:
    -----------
    level : str
        Logging level name
    json_path : str or None
        If given, structured JSON records are also appended to this file
    """
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT, force=True)
    if json_path:
        handler = logging.FileHandler(json_path)
        handler.setFormatter(JsonFormatter('%(asctime)s %(name)s %(levelname)s %(message)s'))
        logging.getLogger().addHandler(handler)
