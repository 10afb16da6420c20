import os

# must happen before numpy binds its BLAS threads: the workload is many tiny
# matmuls and multi-threaded BLAS only slows them down
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
