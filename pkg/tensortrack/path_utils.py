""" utility functions for naming output files after hosts """

import pathvalidate

MAX_FILENAME_LEN = 255

STATS_SUFFIX = ".stats"


def sanitize_filename(filename: str, replacement: str = "_") -> str:
    """replace any illegal characters in a filename and truncate filename if needed

    Args:
        filename: str, filename to sanitize
        replacement: str, value to replace any illegal characters with; default = "_"

    Returns:
        filename valid on every platform with any illegal characters replaced by replacement
    """
    if not filename:
        return filename
    return pathvalidate.sanitize_filename(
        filename,
        replacement_text=replacement,
        platform="universal",
        max_len=MAX_FILENAME_LEN,
    )


def stats_filename(host: str) -> str:
    """name of the stats file written for host"""
    stem = sanitize_filename(host)
    if not stem:
        raise ValueError(f"Cannot derive a file name from host {host!r}")
    return stem[: MAX_FILENAME_LEN - len(STATS_SUFFIX)] + STATS_SUFFIX
