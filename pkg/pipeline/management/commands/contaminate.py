from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Inject RFI into the simulated sky and flag it'
    success_message = 'Wrote contaminated cube and masks'

    def run(self, service):
        flags = service.contaminate()
        self.stdout.write(
            f"Flagged {len(flags.channels.flagged_channels)} channels and "
            f"{flags.outliers.outlier_count} outlier cells ({flags.mask.masked_fraction:.2%} of the cube)"
        )
