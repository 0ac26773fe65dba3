from .base import (ContaminationSpec, Dataset, ManifestError, load_bank,
                   load_dataset, n_contaminated, record_calls,
                   reset_simulator_calls, save_bank, save_dataset,
                   simulator_calls)
from .gandk import (gandk_contaminate, gandk_generator, gandk_observed,
                    gandk_prior, gandk_simulate)
from .sir import (sir_cauchy_contaminate, sir_observed_cauchy,
                  sir_observed_undercount, sir_prior, sir_simulate,
                  sir_simulate_many, sir_summaries, sir_undercount)
from .turin import (turin_noise_only, turin_observed, turin_prior,
                    turin_simulate)

__all__ = [
    "ContaminationSpec", "Dataset", "ManifestError", "load_bank",
    "load_dataset", "n_contaminated", "record_calls",
    "reset_simulator_calls", "save_bank", "save_dataset", "simulator_calls",
    "gandk_contaminate", "gandk_generator", "gandk_observed", "gandk_prior",
    "gandk_simulate", "sir_cauchy_contaminate", "sir_observed_cauchy",
    "sir_observed_undercount", "sir_prior", "sir_simulate",
    "sir_simulate_many", "sir_summaries", "sir_undercount",
    "turin_noise_only", "turin_observed", "turin_prior", "turin_simulate",
]
