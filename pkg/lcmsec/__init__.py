import sys

if sys.version_info < (3, 11):
    sys.exit("Sorry, Python < 3.11 is not supported.")


def version() -> str:
    """Get the package version, trying these sources in order:
    1. Installed distribution metadata (via importlib.metadata)
    2. _version.py (generated by setuptools_scm)
    3. Directly from setuptools_scm

    Returns:
        str: The package version string
    """
    try:
        from importlib.metadata import PackageNotFoundError, version as pkg_version
        try:
            return pkg_version("lcmsec")
        except PackageNotFoundError:
            raise ImportError("lcmsec is not installed")
    except ImportError:
        try:
            from ._version import version
            return version
        except ModuleNotFoundError:
            from setuptools_scm import get_version  # type: ignore[import-not-found]
            return get_version()
