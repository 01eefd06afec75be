from spinnoise import create_app
from spinnoise.cli import cli

app = create_app()

if __name__ == '__main__':
    cli()
