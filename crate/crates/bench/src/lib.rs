//! Criterion benchmarks live under `benches/`: `kernels` times the tensor
//! kernels forward and backward, `model` times one segment forward and one
//! deep-supervision training step at desk scale.
