"""
WSGI entry point for the fixture CT log server
"""
import os

from ctphish.fixture_server import create_app, load_fixture_spec

# Create the WSGI application object from the spec named in the environment
application = create_app(load_fixture_spec(os.environ.get("CTPHISH_FIXTURE_SPEC", "fixture.yaml")))

if __name__ == "__main__":
    application.run()
