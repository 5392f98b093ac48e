# Sphinx configuration for the TwinLite documentation.
#
# Build from the repository root with:
#
#     poetry run sphinx-build docsource docs

import os
import sys

# autodoc imports twinlite from the checkout, not from site-packages.
sys.path.insert(0, os.path.abspath(".."))


# -- Project information -----------------------------------------------------

project = "TwinLite"
copyright = "2026, TwinLite developers"
author = "TwinLite developers"


# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx_autodoc_typehints",
    "sphinx.ext.intersphinx",
    "sphinx.ext.mathjax",
]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "PIL": ("https://pillow.readthedocs.io/en/stable/", None),
}

autodoc_member_order = "bysource"
napoleon_google_docstring = True
napoleon_numpy_docstring = False

templates_path = ["_templates"]
exclude_patterns = []


# -- Options for HTML output -------------------------------------------------

html_theme = "neocrym-sphinx-theme"
html_show_sphinx = False
html_copy_source = False
html_show_source = False
html_static_path = ["_static"]

pygments_style = "colorful"
pygments_dark_style = "fruity"
