import os
import sys

# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

sys.path.insert(0, os.path.abspath("../src"))


# -- Project information -----------------------------------------------------

project = 'miaudit'
copyright = '2026, miaudit developers'
author = 'miaudit developers'

# The full version, including alpha/beta/rc tags
release = '0.1'


# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    # add copy_button
    "sphinx_copybutton",
    # use sphinx-design
    "sphinx_design",
]

# The numeric stack is heavy; autodoc only needs signatures and docstrings
autodoc_mock_imports = ["hyperopt", "sklearn"]

# List of patterns, relative to source directory, that match files and
# directories to ignore when looking for source files.
# This pattern also affects html_static_path and html_extra_path.
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']


# -- Options for HTML output -------------------------------------------------

html_theme = 'pydata_sphinx_theme'

html_theme_options = {
    "show_toc_level": 2,
}
