import os
import jinja2


env = jinja2.Environment(
    loader=jinja2.FileSystemLoader(searchpath=os.path.dirname(__file__)),
    autoescape=jinja2.select_autoescape(enabled_extensions=("svg.j2",), default_for_string=False),
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
)
