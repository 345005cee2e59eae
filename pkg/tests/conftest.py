import os

# Small per-layer GEMMs: BLAS worker threads cost more than they buy on the
# CI-sized machines this suite targets (see mifc.kernels.single_thread_blas).
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
