"""Built-in plugins and the plugin manager for tensortrack"""

import importlib

import pluggy

from .. import hookspecs
from ..constants import APP_NAME

DEFAULT_PLUGINS = (
    "tensortrack.plugins.detectors.threshold",
    "tensortrack.plugins.detectors.ewma",
    "tensortrack.plugins.detectors.cusum",
)

_PM = None


def get_plugin_manager() -> pluggy.PluginManager:
    pm = pluggy.PluginManager(APP_NAME)
    pm.add_hookspecs(hookspecs)
    pm.load_setuptools_entrypoints(APP_NAME)
    return pm


def plugin_manager() -> pluggy.PluginManager:
    """Return the shared plugin manager, loading the default plugins on first use

    Loading is deferred because the built-in plugins import the modules that
    call them.
    """
    global _PM
    if _PM is None:
        pm = get_plugin_manager()
        for plugin in DEFAULT_PLUGINS:
            mod = importlib.import_module(plugin)
            pm.register(mod, plugin)
        _PM = pm
    return _PM
