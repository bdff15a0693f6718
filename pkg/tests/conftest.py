import os

# Small-matrix workloads: threaded BLAS only adds contention. Must be set
# before numpy is first imported by any test module.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
