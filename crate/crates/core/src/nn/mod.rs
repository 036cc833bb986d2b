//! Minimal differentiable numerical core: dense matrices, standard network
//! primitives, a per-pass gradient tape and an Adam optimizer.

mod matrix;
mod optim;
mod params;
pub mod rng;
mod tape;

pub use matrix::Matrix;
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

pub(crate) use tape::log_sum_exp;

/// `y = x·Wᵀ (+ b)` on plain matrices. `W` is `out × in`, `b` has length `out`.
pub fn linear(x: &Matrix, w: &Matrix, b: Option<&[f64]>) -> Result<Matrix> {
    let mut y = x.matmul_t(w)?;
    if let Some(b) = b {
        if b.len() != w.rows() {
            return Err(Error::Shape(format!(
                "bias of length {} for {} outputs",
                b.len(),
                w.rows()
            )));
        }
        for r in 0..y.rows() {
            for (o, bv) in y.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Ok(y)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Soft-label cross entropy `−Σ p[v]·log softmax(logits)[v]` and its gradient
/// with respect to the logits, `softmax(logits) − p`.
pub fn cross_entropy(p_target: &[f64], logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p_target.len() != logits.len() {
        return Err(Error::Shape(format!(
            "target distribution of width {} for {} logits",
            p_target.len(),
            logits.len()
        )));
    }
    let mass: f64 = p_target.iter().sum();
    if (mass - 1.0).abs() > 1e-6 || p_target.iter().any(|p| *p < 0.0) {
        return Err(Error::Validation(format!(
            "target distribution sums to {mass}, expected 1"
        )));
    }
    let lse = log_sum_exp(logits);
    let loss = p_target
        .iter()
        .zip(logits)
        .filter(|(p, _)| **p != 0.0)
        .map(|(p, z)| -p * (z - lse))
        .sum();
    let grad = p_target
        .iter()
        .zip(logits)
        .map(|(p, z)| (z - lse).exp() - p)
        .collect();
    Ok((loss, grad))
}

/// Tape handles for one causal self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub heads: usize,
}

/// Standard multi-head causal self-attention: `softmax(QKᵀ/√d_h + mask)·V·W_oᵀ`.
pub fn attention_block(tape: &mut Tape<'_>, x: Var, p: &AttentionVars) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::Validation("attention over an empty sequence".into()));
    }
    let q = tape.matmul_t(x, p.query)?;
    let k = tape.matmul_t(x, p.key)?;
    let v = tape.matmul_t(x, p.value)?;
    let a = tape.causal_attention(q, k, v, p.heads)?;
    tape.matmul_t(a, p.output)
}

/// Maximum relative error between analytic gradients and central differences.
///
/// `loss_fn` must be deterministic. Each coordinate `(param, flat index)` in
/// `coords` is perturbed by `±h`; the error for a coordinate is
/// `|analytic − fd| / (|analytic| + |fd| + 1e-12)`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &mut ParamStore,
    analytic: &Gradients,
    coords: &[(ParamId, usize)],
    h: f64,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut worst = 0.0f64;
    for &(id, idx) in coords {
        let original = params.get(id).as_slice()[idx];
        params.get_mut(id).as_mut_slice()[idx] = original + h;
        let up = loss_fn(params);
        params.get_mut(id).as_mut_slice()[idx] = original - h;
        let down = loss_fn(params);
        params.get_mut(id).as_mut_slice()[idx] = original;
        let fd = (up - down) / (2.0 * h);
        let an = analytic.get(id).map_or(0.0, |g| g.as_slice()[idx]);
        let err = (an - fd).abs() / (an.abs() + fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    worst
}

/// Samples `count` coordinates uniformly over all scalars of the store.
pub fn sample_coords(
    params: &ParamStore,
    count: usize,
    rng: &mut rng::LabRng,
) -> Vec<(ParamId, usize)> {
    use rand::Rng;
    let total = params.scalar_count();
    (0..count)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            for (id, _, m) in params.iter() {
                if flat < m.len() {
                    return (id, flat);
                }
                flat -= m.len();
            }
            unreachable!("flat index within total")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rng::rng_from_seed;

    #[test]
    fn linear_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let eye = Matrix::identity(2);
        assert_eq!(linear(&x, &eye, None).unwrap(), x);
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        assert_eq!(linear(&x, &w, None).unwrap().as_slice(), &[5.0]);
        assert_eq!(linear(&x, &w, Some(&[1.0])).unwrap().as_slice(), &[6.0]);
        assert!(matches!(
            linear(&x, &Matrix::zeros(2, 3), None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = rng_from_seed(11);
        let x = Matrix::randn(3, 4, 1.0, &mut rng);
        let w = Matrix::randn(5, 4, 1.0, &mut rng);
        let y = linear(&x, &w, None).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += x.get(i, k) * w.get(j, k);
                }
                assert!((y.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap());
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15 && s.get(0, 1) < 1e-300);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = vec![1.0 / 8.0; 8];
        let (loss, grad) = cross_entropy(&uniform, &[0.3; 8]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));

        let mut onehot = vec![0.0; 4];
        onehot[2] = 1.0;
        let losses: Vec<f64> = [1.0, 5.0, 20.0, 60.0]
            .iter()
            .map(|m| {
                let mut z = vec![0.0; 4];
                z[2] = *m;
                cross_entropy(&onehot, &z).unwrap().0
            })
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(losses[3] < 1e-20);

        assert!(matches!(
            cross_entropy(&[0.5, 0.6], &[0.0, 0.0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let mut rng = rng_from_seed(5);
        let logits = Matrix::randn(1, 12, 2.0, &mut rng).into_vec();
        let mut p = Matrix::randn(1, 12, 1.0, &mut rng).into_vec();
        p.iter_mut().for_each(|v| *v = v.exp());
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let (_, grad) = cross_entropy(&p, &logits).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up[i] += h;
            let mut down = logits.clone();
            down[i] -= h;
            let fd = (cross_entropy(&p, &up).unwrap().0 - cross_entropy(&p, &down).unwrap().0)
                / (2.0 * h);
            let rel = (grad[i] - fd).abs() / (grad[i].abs() + fd.abs() + 1e-12);
            assert!(rel < 1e-4, "coordinate {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn linear_loss_has_exact_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(2);
        let w = store.add("w", Matrix::randn(3, 3, 1.0, &mut rng));
        let loss = |s: &ParamStore| s.get(w).as_slice().iter().sum::<f64>();
        let mut grads = Gradients::for_store(&store);
        grads.accumulate(w, &Matrix::filled(3, 3, 1.0), 1.0);
        let coords: Vec<_> = (0..9).map(|i| (w, i)).collect();
        let err = finite_diff_check(loss, &mut store, &grads, &coords, 1e-5);
        assert!(err < 1e-9, "{err}");
    }
}
