"""
Console logging for pevsched. Each module writes to a dotted logger
(``pevsched.offline.peak``, ``pevsched.online.event``, ...). Records only
reach the console when their logger name starts with a registered prefix,
so a full replication batch stays quiet unless asked otherwise.
::

    import pevsched.log
    pevsched.log.setup()
    pevsched.log.add('pevsched.online')

From the command line use ``--log pevsched.online``, with ``--verbose``
for per event and per peel detail. ``--list-loggers`` prints the names
that can be given to ``--log``; from Python use
``pevsched.log.list_all('pevsched')``, and ``pevsched.log.list()`` for the
prefixes currently shown.
"""
import logging

# Registered prefixes, in the order they were added.
_prefixes = []

# Logger names used across the package. getLogger() only registers a
# name on first use, so these are created at import to make them visible
# to list_all() before any solve has run.
KNOWN_LOGGERS = [
    'pevsched.model.validate',
    'pevsched.offline.solve',
    'pevsched.offline.peak',
    'pevsched.offline.alloc',
    'pevsched.offline.certify',
    'pevsched.offline.oracle',
    'pevsched.online.event',
    'pevsched.online.rates',
    'pevsched.online.run',
    'pevsched.scenario.replication',
    'pevsched.scenario.sweep',
    'pevsched.check',
    'pevsched.cli',
]

for _name in KNOWN_LOGGERS:
    logging.getLogger(_name)

def add(prefix):
    """
    Show records from loggers whose name starts with ``prefix``.

    :param prefix: Logger name or prefix, eg. ``pevsched.offline``.
    """
    if prefix not in _prefixes:
        _prefixes.append(prefix)

def remove(prefix):
    """
    Stop showing records for a prefix previously given to add(). Unknown
    prefixes are ignored.

    :param prefix: Prefix to remove.
    """
    if prefix in _prefixes:
        _prefixes.remove(prefix)

def clear():
    """
    Forget every prefix. Nothing is shown until add() is called again.
    """
    del _prefixes[:]

def list():
    """
    Print and return the prefixes currently shown.
    """
    print("Showing logs for ...")
    for prefix in _prefixes:
        print("\t", prefix)
    return [prefix for prefix in _prefixes]

def list_all(list_filter=''):
    """
    Print and return every registered logger name, sorted.

    :param list_filter: Only names starting with this, eg.
        ``pevsched.offline``.
    """
    names = sorted(
        name for name in logging.root.manager.loggerDict
        if name.startswith(list_filter))
    for name in names:
        print(name)
    return names

class LogFilter(logging.Filter):
    """
    Pass a record when its logger name matches a registered prefix.
    """
    def filter(self, record):
        return any(record.name.startswith(p) for p in _prefixes)

def setup(log_format="%(name)s: %(message)s", level=logging.INFO):
    """
    Replace the root handlers with one console handler filtered by
    LogFilter.

    :param log_format: ``logging.Formatter`` format string.
    :param level: Lowest level shown, eg. ``logging.DEBUG``.
    """
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(log_format))
    handler.addFilter(LogFilter())

    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(level)

def configure(prefixes=None, verbose=False):
    """
    Command line logging. Shows ``pevsched.cli`` progress by default,
    the given prefixes instead when there are any, and the whole package
    at debug level for ``verbose`` without prefixes.

    :param prefixes: Prefixes from ``--log``.
    :param verbose: Show debug records.
    """
    setup(level=logging.DEBUG if verbose else logging.INFO)
    clear()
    for prefix in prefixes or ['pevsched.cli']:
        add(prefix)
    if verbose and not prefixes:
        add('pevsched')
