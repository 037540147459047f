import os
import sys

sys.path.append(os.path.abspath('..'))
project = 'nextbasket'
copyright = '2024, Tomek H.'
author = 'Tomek H.'
release = '0.1.0'

extensions = ['sphinx.ext.autodoc']

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

html_theme = 'nature'
html_title = 'nextbasket: knowledge-prompted next-basket recommendation'

autodoc_member_order = 'bysource'
