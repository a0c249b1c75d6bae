from .toy import (ToyDiT, LatentState, KVCache, build_toy_model, make_latent, serial_reference,
                  divergence, auto_warmup)
from .generic import ExecutionResult, KVRead, Worker, RUNNERS
from .pipeline import PipeFusionWorker, run_pipefusion
from .patch import DistriFusionWorker, run_distrifusion
from .factories import execute, compare_executions, run_manifest, serial_manifest, EXECUTABLE
