from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Remove foregrounds from every variant and write the report CSVs'
    success_message = 'Wrote reports'

    def run(self, service):
        summary = service.clean_and_evaluate()
        for row in summary:
            self.stdout.write(
                f"{row['method']:>8} {row['variant']}  rms={row['rms']:.4g}  "
                f"delta_log_cl={row['delta_log_cl']:.4f}"
            )
