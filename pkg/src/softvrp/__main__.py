import os

# BLAS threads must be pinned before numpy loads
_threads = os.environ.get("SOFTVRP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from softvrp.cli import main  # noqa: E402

main()
