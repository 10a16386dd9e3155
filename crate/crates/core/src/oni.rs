//! Row orthogonalization by Newton's iteration.
//!
//! A proxy matrix `Z` (`n x d`, `n <= d`) is scaled to unit Frobenius norm,
//! `V = Z / ||Z||_F`, so that `S = V V^T` has spectral radius at most one. The
//! iteration `B_{t+1} = 1.5 B_t - 0.5 B_t^3 S` from `B_0 = I` converges to
//! `S^{-1/2}`, and `W = B_T V` has orthonormal rows in the limit. Every step
//! is an ordinary graph operation, so gradients flow back into `Z`.
//!
//! The recurrence is evaluated in coupled Newton-Schulz form: with
//! `Y_t = S B_t` and `M_t = (3I - B_t Y_t) / 2`, `B_{t+1} = M_t B_t` and
//! `Y_{t+1} = Y_t M_t`. The iterates are the same in exact arithmetic, but
//! the uncoupled form (and couplings with the factors in the other order)
//! amplify rounding error once converged, while this one stays at round-off
//! for any number of steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_ITERATIONS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OniConfig {
    pub iterations: usize,
}

impl Default for OniConfig {
    fn default() -> Self {
        OniConfig {
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

impl OniConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("ONI needs at least one iteration"));
        }
        Ok(())
    }
}

/// Checks that an `rows x cols` proxy can be row-orthogonalized.
pub fn check_shape(rows: usize, cols: usize) -> Result<()> {
    if rows > cols {
        return Err(Error::CannotOrthogonalize { rows, cols });
    }
    Ok(())
}

/// Appends the orthogonalization of matrix node `z` to the graph.
pub fn orthogonalize_node<T: Real>(g: &mut Graph<T>, z: NodeId, iterations: usize) -> Result<NodeId> {
    let (n, d) = g.value(z).dims2()?;
    check_shape(n, d)?;
    OniConfig { iterations }.validate()?;
    let v = g.frobenius_normalize(z)?;
    let vt = g.transpose(v)?;
    let s = g.matmul(v, vt)?;
    let three = g.input(Tensor::eye(n).map(|x| x * T::c(3.0)))?;
    let mut b = g.input(Tensor::eye(n))?;
    let mut y = s;
    for _ in 0..iterations {
        (b, y) = newton_step(g, three, b, y)?;
    }
    g.matmul(b, v)
}

/// One coupled step; `three` holds `3I`.
fn newton_step<T: Real>(g: &mut Graph<T>, three: NodeId, b: NodeId, y: NodeId) -> Result<(NodeId, NodeId)> {
    let by = g.matmul(b, y)?;
    let m = g.sub(three, by)?;
    let m = g.scale(m, 0.5)?;
    Ok((g.matmul(m, b)?, g.matmul(y, m)?))
}

/// Row-orthogonalized `z` after `iterations` Newton steps.
pub fn orthogonalize<T: Real>(z: &Tensor<T>, iterations: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let z = g.input(z.clone())?;
    let w = orthogonalize_node(&mut g, z, iterations)?;
    Ok(g.value(w).clone())
}

/// `||B_t B_t^T S - I||_F` for `t = 0..=iterations`, evaluated in `f64`.
pub fn convergence_trace<T: Real>(z: &Tensor<T>, iterations: usize) -> Result<Vec<f64>> {
    let (n, d) = z.dims2()?;
    check_shape(n, d)?;
    let mut g = Graph::<f64>::new();
    let z = g.input(z.cast())?;
    let v = g.frobenius_normalize(z)?;
    let vt = g.transpose(v)?;
    let s = g.matmul(v, vt)?;
    let eye = g.input(Tensor::eye(n))?;
    let three = g.input(Tensor::eye(n).map(|x| x * 3.0))?;
    let mut b = eye;
    let mut y = s;
    let mut trace = Vec::with_capacity(iterations + 1);
    for t in 0..=iterations {
        let bt = g.transpose(b)?;
        let bbt = g.matmul(b, bt)?;
        let m = g.matmul(bbt, s)?;
        let r = g.sub(m, eye)?;
        trace.push(g.value(r).norm());
        if t == iterations {
            break;
        }
        (b, y) = newton_step(&mut g, three, b, y)?;
    }
    Ok(trace)
}

/// Graph node holding the weight a layer actually applies: the
/// orthogonalized proxy (reshaped back to conv layout) for flagged
/// parameters, the raw value otherwise.
pub fn effective_weight<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    param: ParamId,
    cfg: &OniConfig,
) -> Result<NodeId> {
    let node = g.param(store, param)?;
    if !store.get(param).requires_orthogonalization {
        return Ok(node);
    }
    let shape = g.shape(node).to_vec();
    let rows = shape[0];
    let cols = shape[1..].iter().product();
    let z = g.reshape(node, &[rows, cols])?;
    let w = orthogonalize_node(g, z, cfg.iterations)?;
    g.reshape(w, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;

    fn gram_residual(w: &Tensor<f64>) -> f64 {
        let (n, d) = w.dims2().unwrap();
        let x = w.data();
        let mut r = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..d).map(|k| x[i * d + k] * x[j * d + k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                r += (dot - target).powi(2);
            }
        }
        r.sqrt()
    }

    #[test]
    fn scaled_identity_maps_to_identity() {
        let z = Tensor::<f64>::eye(3).map(|v| 2.0 * v);
        let w = orthogonalize(&z, 5).unwrap();
        assert!(w.max_abs_diff(&Tensor::eye(3)) < 1e-6);
    }

    #[test]
    fn scaled_orthonormal_rows_are_a_fixed_point() {
        // Rows of a 2x4 matrix with orthonormal rows, scaled by 3.
        let h = 0.5;
        let q = Tensor::<f64>::from_f64([2, 4], &[h, h, h, h, h, -h, h, -h]).unwrap();
        let w = orthogonalize(&q.map(|v| 3.0 * v), 5).unwrap();
        assert!(w.max_abs_diff(&q) < 1e-6);
    }

    #[test]
    fn rejects_tall_and_zero_matrices() {
        let tall = Tensor::<f64>::ones([4, 3]);
        assert!(matches!(
            orthogonalize(&tall, 5),
            Err(Error::CannotOrthogonalize { rows: 4, cols: 3 })
        ));
        assert!(orthogonalize(&Tensor::<f64>::zeros([2, 3]), 5).is_err());
    }

    #[test]
    fn unflagged_parameter_passes_through() {
        let mut store = ParamStore::<f64>::new();
        let value = Tensor::from_fn([3, 16, 1, 1], |i| (i as f64 * 0.37).sin());
        let id = store.add("w", value.clone(), ParamKind::Weight).unwrap();
        let mut g = Graph::new();
        let w = effective_weight(&mut g, &store, id, &OniConfig::default()).unwrap();
        assert_eq!(g.value(w), &value);
    }

    #[test]
    fn flagged_pointwise_weight_gets_orthonormal_rows() {
        let mut store = ParamStore::<f64>::new();
        let value = Tensor::from_fn([3, 16, 1, 1], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1 + 0.01 * i as f64);
        let id = store.add_orthogonal("w", value).unwrap();
        let mut g = Graph::new();
        let w = effective_weight(&mut g, &store, id, &OniConfig::default()).unwrap();
        assert_eq!(g.shape(w), &[3, 16, 1, 1]);
        let m = g.value(w).clone().reshape([3, 16]).unwrap();
        assert!(gram_residual(&m) < 1e-4);
    }

    #[test]
    fn trace_starts_at_distance_of_s_from_identity() {
        let z = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 0.0001]).unwrap();
        let trace = convergence_trace(&z, 3).unwrap();
        assert_eq!(trace.len(), 4);
        // S = diag(1, 1e-8) / (1 + 1e-8): distance to I is close to 1.
        assert!((trace[0] - 1.0).abs() < 1e-6);
    }
}
