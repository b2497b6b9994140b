from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Restore flagged cells and write the four comparison datasets'
    success_message = 'Wrote variants a-d'

    def run(self, service):
        service.restore()
