//! Seeded synthetic workloads.
//!
//! Every tensor is drawn from its own ChaCha20 stream: the key comes from the
//! experiment seed (`SeedableRng::seed_from_u64`) and the 64-bit stream id is
//! `head << 8 | tensor_tag`. ChaCha20 is counter based, so heads and tensors
//! are independent and evaluation order never changes a value.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionProblem;
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, WorkloadSpec};
use crate::harness::tensor_io::read_tensor;
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
enum Tensor {
    Q = 1,
    K = 2,
    V = 3,
    Needle = 4,
}

fn stream(seed: u64, head: usize, tensor: Tensor) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((head as u64) << 8) | tensor as u64);
    rng
}

fn normals(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn gaussian_matrix(seed: u64, head: usize, tensor: Tensor, n: usize, d: usize) -> Matrix {
    let data = normals(&mut stream(seed, head, tensor), n * d);
    Matrix::new(n, d, data).expect("normal samples are finite")
}

/// Standard-normal Q, K, V; scores use the default `1/sqrt(d)` scale.
pub fn gaussian_problem(seed: u64, head: usize, n: usize, d: usize) -> AttentionProblem {
    AttentionProblem::new(
        gaussian_matrix(seed, head, Tensor::Q, n, d),
        gaussian_matrix(seed, head, Tensor::K, n, d),
        gaussian_matrix(seed, head, Tensor::V, n, d),
    )
    .expect("shapes agree")
}

/// Where the planted key/value pairs sit and which one the last query asks for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleTruth {
    pub positions: Vec<usize>,
    pub target: usize,
    pub target_position: usize,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub problem: AttentionProblem,
    pub needle: Option<NeedleTruth>,
}

/// Plants `num_pairs` fresh Gaussian key/value pairs at distinct positions
/// before the last row, then points the last query at one of them.
pub fn needle_problem(
    seed: u64,
    head: usize,
    n: usize,
    d: usize,
    num_pairs: usize,
    signal_strength: f64,
) -> Result<Workload> {
    if num_pairs == 0 || 2 * num_pairs > n {
        return Err(Error::Capacity {
            pairs: num_pairs,
            needed: 2 * num_pairs,
            n,
        });
    }
    let base = gaussian_problem(seed, head, n, d);
    let mut q = base.q().data().to_vec();
    let mut k = base.k().data().to_vec();
    let mut v = base.v().data().to_vec();

    let mut rng = stream(seed, head, Tensor::Needle);
    let positions = sample(&mut rng, n - 1, num_pairs).into_vec();
    let mut keys = Vec::with_capacity(num_pairs);
    let mut values = Vec::with_capacity(num_pairs);
    for &pos in &positions {
        let key = normals(&mut rng, d);
        let value = normals(&mut rng, d);
        k[pos * d..(pos + 1) * d].copy_from_slice(&key);
        v[pos * d..(pos + 1) * d].copy_from_slice(&value);
        keys.push(key);
        values.push(value);
    }
    let target = rng.random_range(0..num_pairs);
    for (slot, &x) in q[(n - 1) * d..].iter_mut().zip(&keys[target]) {
        *slot = signal_strength * x;
    }

    let problem = AttentionProblem::new(
        Matrix::new(n, d, q)?,
        Matrix::new(n, d, k)?,
        Matrix::new(n, d, v)?,
    )?;
    Ok(Workload {
        problem,
        needle: Some(NeedleTruth {
            target_position: positions[target],
            positions,
            target,
            value: values.swap_remove(target),
        }),
    })
}

pub fn generate_workload(cfg: &ExperimentConfig, head: usize) -> Result<Workload> {
    match &cfg.workload {
        WorkloadSpec::Gaussian => Ok(Workload {
            problem: gaussian_problem(cfg.seed, head, cfg.n, cfg.d),
            needle: None,
        }),
        WorkloadSpec::Needle {
            num_pairs,
            signal_strength,
        } => needle_problem(cfg.seed, head, cfg.n, cfg.d, *num_pairs, *signal_strength),
        WorkloadSpec::External { heads } => {
            let paths = heads.get(head).ok_or(Error::Index {
                index: head,
                len: heads.len(),
            })?;
            let q = read_tensor(&paths.q)?;
            let k = read_tensor(&paths.k)?;
            let v = read_tensor(&paths.v)?;
            if q.rows() != cfg.n || q.cols() != cfg.d {
                return Err(Error::config(
                    format!("workload.heads[{head}].q"),
                    format!("tensor is {}x{}, config says {}x{}", q.rows(), q.cols(), cfg.n, cfg.d),
                ));
            }
            Ok(Workload {
                problem: AttentionProblem::new(q, k, v)?,
                needle: None,
            })
        }
    }
}
