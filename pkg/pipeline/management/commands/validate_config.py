import json

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Validate a run config and print the resolved values'

    def handle(self, *args, **options):
        config = self.load(options)
        self.stdout.write(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        self.stdout.write(self.style.SUCCESS(f"Configuration is valid (hash {config.config_hash})"))
