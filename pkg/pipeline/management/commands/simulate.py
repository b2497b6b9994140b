from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Simulate the truth cubes (total sky, HI, foregrounds)'
    success_message = 'Wrote truth cubes'

    def run(self, service):
        service.simulate()
