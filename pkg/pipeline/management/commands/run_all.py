from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Run simulate, contaminate, restore and clean_eval in order'
    success_message = 'Completed all stages'

    def run(self, service):
        service.run_all()
