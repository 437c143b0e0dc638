//! Graph construction and graph convolution.
//!
//! Two adjacency sources feed each gate convolution: a static predefined
//! graph built once from node coordinates, and a dynamic Gaussian-kernel
//! graph recomputed from the current hidden representation at every step.
//! Both are row-stochastic after a self-loop and row softmax.

use crate::autodiff::{Tape, VarId};
use crate::error::{IbnError, Result};
use crate::tensor::Tensor;

/// Euclidean distance matrix of row vectors. Symmetric, zero diagonal.
pub fn pairwise_euclidean(points: &Tensor) -> Result<Tensor> {
    let (n, d) = points.dims2()?;
    let p = points.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = p[i * d + k] - p[j * d + k];
                s += diff * diff;
            }
            let dist = s.sqrt();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Gaussian kernel on squared distances: exp(-dist^2 / (2 gamma)), then
/// self-loop (+1 on the diagonal) and row softmax.
pub fn gaussian_adjacency(dist: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma <= 0.0 {
        return Err(IbnError::NonPositiveBandwidth);
    }
    let (n, m) = dist.dims2()?;
    if n != m {
        return Err(IbnError::invalid(format!(
            "distance matrix must be square, got {:?}",
            dist.shape()
        )));
    }
    let mut kernel = dist.map(|d| (-d * d / (2.0 * gamma)).exp());
    for i in 0..n {
        let v = kernel.data()[i * n + i] + 1.0;
        kernel.data_mut()[i * n + i] = v;
    }
    Ok(row_softmax(&kernel))
}

/// Static graph from physical coordinates: edges within `threshold`
/// distance get Gaussian weights with bandwidth = mean distance squared,
/// everything else 0, unit diagonal, rows normalized to sum 1.
pub fn build_predefined(coords: &Tensor, threshold: f64) -> Result<Tensor> {
    let dist = pairwise_euclidean(coords)?;
    build_predefined_from_distances(&dist, threshold)
}

/// Same construction from an already-known distance matrix.
pub fn build_predefined_from_distances(dist: &Tensor, threshold: f64) -> Result<Tensor> {
    let (n, m) = dist.dims2()?;
    if n != m {
        return Err(IbnError::invalid(format!(
            "distance matrix must be square, got {:?}",
            dist.shape()
        )));
    }
    if dist.data().iter().any(|&v| v < 0.0) {
        return Err(IbnError::invalid("negative distance in predefined graph input"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += dist.data()[i * n + j];
                count += 1;
            }
        }
    }
    let mean_d = if count > 0 { sum / count as f64 } else { 1.0 };
    let bw = (mean_d * mean_d).max(f64::MIN_POSITIVE);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                a[i * n + j] = 1.0;
            } else {
                let d = dist.data()[i * n + j];
                if d <= threshold {
                    a[i * n + j] = (-d * d / (2.0 * bw)).exp();
                }
            }
        }
    }
    // Rows have at least the diagonal 1, so normalization is safe.
    for i in 0..n {
        let row_sum: f64 = a[i * n..(i + 1) * n].iter().sum();
        for j in 0..n {
            a[i * n + j] /= row_sum;
        }
    }
    Tensor::new(vec![n, n], a)
}

fn row_softmax(t: &Tensor) -> Tensor {
    let (n, m) = t.dims2().expect("row_softmax on matrix");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &t.data()[i * m..(i + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..m {
            let e = (row[j] - max).exp();
            out[i * m + j] = e;
            denom += e;
        }
        for j in 0..m {
            out[i * m + j] /= denom;
        }
    }
    Tensor::new(vec![n, m], out).expect("row_softmax shape")
}

/// Tape path of [`gaussian_adjacency`]: dynamic adjacency from the current
/// representation, differentiable through the kernel into the features.
pub fn gaussian_adjacency_tape(tape: &mut Tape, x: VarId, gamma: f64) -> Result<VarId> {
    if gamma <= 0.0 {
        return Err(IbnError::NonPositiveBandwidth);
    }
    let (n, _) = tape.value(x).dims2()?;
    let sq = tape.pairwise_sq_dist(x)?;
    let scaled = tape.affine(sq, -1.0 / (2.0 * gamma), 0.0);
    let kernel = tape.exp(scaled);
    let eye = tape.constant(Tensor::eye(n));
    let with_loop = tape.add(kernel, eye)?;
    Ok(tape.softmax(with_loop))
}

/// Self-learned adjacency from two node embedding tables:
/// softmax(relu(E1 . E2^T)). Used by the adaptive-graph ablation in place
/// of the Gaussian kernel.
pub fn adaptive_adjacency_tape(tape: &mut Tape, e1: VarId, e2: VarId) -> Result<VarId> {
    let e2t = tape.transpose(e2)?;
    let scores = tape.matmul(e1, e2t)?;
    let rect = tape.relu(scores);
    Ok(tape.softmax(rect))
}

/// One graph convolution: LayerNorm(A_pre.x.W_pre + A_dyn.x.W_dyn).
/// `a_pre` is a constant node (static graph); `a_dyn` is on the tape. No
/// bias term and no learned affine inside the normalization.
pub fn ggcn_apply(
    tape: &mut Tape,
    a_pre: VarId,
    a_dyn: VarId,
    x: VarId,
    w_pre: VarId,
    w_dyn: VarId,
) -> Result<VarId> {
    let mix_pre = tape.matmul(a_pre, x)?;
    let proj_pre = tape.matmul(mix_pre, w_pre)?;
    let mix_dyn = tape.matmul(a_dyn, x)?;
    let proj_dyn = tape.matmul(mix_dyn, w_dyn)?;
    let summed = tape.add(proj_pre, proj_dyn)?;
    Ok(tape.layer_norm(summed))
}
