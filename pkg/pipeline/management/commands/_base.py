import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from imbench.exceptions import ConfigError, ImbenchError, RestorerContractError
from pipeline.config import load_config
from pipeline.services import PipelineService

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_STAGE_FAILURE = 3
EXIT_RESTORER_CONTRACT = 4


class PipelineCommand(BaseCommand):
    """Shared flags and exit codes of the pipeline commands"""
    success_message = 'Done'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Run config file (section.key = value lines)')
        parser.add_argument('--out', default=None, help='Output directory; overrides run.output_dir')
        parser.add_argument('--seed', type=int, default=None, help='Master seed; overrides run.seed')
        parser.add_argument('--threads', type=int, default=None, help='Worker cap for parallel steps')
        parser.add_argument(
            '--profile',
            choices=sorted(settings.PIPELINE_PROFILES),
            default=None,
            help='Default values to start from (IMBENCH_PROFILE when omitted)',
        )

    def load(self, options):
        if options['threads'] is not None and options['threads'] < 1:
            raise CommandError('--threads must be at least 1', returncode=EXIT_CONFIG_ERROR)
        try:
            return load_config(
                options['config'],
                profile=options['profile'],
                seed=options['seed'],
                output_dir=options['out'],
            )
        except ConfigError as e:
            raise CommandError(f"Invalid configuration:\n{e}", returncode=EXIT_CONFIG_ERROR) from e

    def run(self, service):
        raise NotImplementedError('subclasses of PipelineCommand must provide a run() method')

    def handle(self, *args, **options):
        config = self.load(options)
        service = PipelineService(config, threads=options['threads'])
        try:
            self.run(service)
        except RestorerContractError as e:
            logger.error(f"Restorer contract violated: {e}")
            raise CommandError(str(e), returncode=EXIT_RESTORER_CONTRACT) from e
        except ImbenchError as e:
            raise CommandError(str(e), returncode=EXIT_STAGE_FAILURE) from e
        self.stdout.write(self.style.SUCCESS(f"{self.success_message} in {service.output_dir}"))