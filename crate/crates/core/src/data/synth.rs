use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Gaussian clusters of standard deviation `spread` around `n_cls` random
/// unit-norm centres. Example `i` has label `i mod n_cls`, so every prefix is
/// close to balanced.
pub fn synth_blobs(seed: u64, n_cls: usize, d_in: usize, per_class: usize, spread: Scalar) -> Result<Dataset> {
    if !(spread > 0.0) || n_cls == 0 || d_in == 0 {
        return Err(Error::Input(format!(
            "blobs need spread > 0 and positive sizes (spread {spread}, {n_cls} classes, d_in {d_in})"
        )));
    }
    let mut r = rng::rng(rng::derive(seed, rng::stream::DATA));
    let centres: Vec<Vec<Scalar>> = (0..n_cls)
        .map(|_| {
            let v: Vec<Scalar> = (0..d_in).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<Scalar>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let n = n_cls * per_class;
    let mut data = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % n_cls;
        for &c in &centres[k] {
            let z: Scalar = StandardNormal.sample(&mut r);
            data.push(c + spread * z);
        }
        labels.push(k);
    }
    Dataset::new("blobs", Tensor::new(n, d_in, data)?, labels, n_cls)
}
