//! Batched evaluation and differentiation of the field network.
//!
//! A chunk of `n` points is pushed through the network as `n` primal rows
//! followed by `3n` tangent rows (row `n + j*n + i` carries the derivative of
//! point `i` along axis `j`). Tangents are linear in the activations, so the
//! weight products for all `4n` rows share one matrix multiply per layer.
//! The input gradient of the field is read off the tangent rows of the
//! output layer, and parameter gradients of a loss on `(f, ∇f)` come from a
//! single reverse sweep over the whole augmented graph.

use rayon::prelude::*;

use super::real::{gemm, sigmoid, softplus, MatRef};
use super::{FieldParams, Real};
use crate::{Error, Result};

/// Points per independently evaluated chunk. Chunk results are combined in
/// chunk order, so results do not depend on the thread count.
const CHUNK: usize = 256;

/// Per-point loss value and its partial derivatives with respect to the
/// prediction and the prediction's input gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLossEval<T> {
    /// The loss being differentiated.
    pub value: T,
    /// Components reported alongside the value (not differentiated).
    pub terms: [T; 3],
    pub d_pred: T,
    pub d_grad: [T; 3],
}

/// A loss defined per batch point on `(f(q), ∇f(q))`.
pub trait PointLoss<T>: Sync {
    fn eval(&self, index: usize, pred: T, grad: [T; 3]) -> PointLossEval<T>;
}

/// Mean loss over a batch and its gradient with respect to every parameter.
#[derive(Debug, Clone)]
pub struct LossGradients<T> {
    pub loss: f64,
    /// Batch means of the individual components.
    pub terms: [f64; 3],
    pub grads: Vec<T>,
}

struct Tape<T> {
    n: usize,
    rows: usize,
    /// Input matrix of every layer, `rows x inp`; the last one feeds the output layer.
    inputs: Vec<Vec<T>>,
    /// Hidden pre-activations, `rows x width` (tangent rows hold the tangents).
    pre: Vec<Vec<T>>,
    /// Sigmoid of the primal pre-activations, `n x width`.
    sig: Vec<Vec<T>>,
    pred: Vec<T>,
    grad: Vec<[T; 3]>,
}

fn forward_chunk<T: Real>(params: &FieldParams<T>, points: &[[T; 3]], tangents: bool) -> Tape<T> {
    let n = points.len();
    let rows = if tangents { 4 * n } else { n };
    let shapes = params.shapes();
    let hidden = shapes.len() - 1;
    let emb = params.embedding();
    let e_dim = emb.dim();
    let skip = params.network().skip_layer;

    let mut embedded = vec![T::zero(); rows * e_dim];
    let mut row = vec![0.0; e_dim];
    let mut jac = [vec![0.0; e_dim], vec![0.0; e_dim], vec![0.0; e_dim]];
    for (i, q) in points.iter().enumerate() {
        let q = q.map(Real::to_f64);
        if tangents {
            let [j0, j1, j2] = &mut jac;
            emb.embed_into(&q, &mut row, Some([j0, j1, j2]));
            for (j, col) in jac.iter().enumerate() {
                let r = n + j * n + i;
                for (dst, src) in embedded[r * e_dim..(r + 1) * e_dim].iter_mut().zip(col) {
                    *dst = T::from_f64(*src);
                }
            }
        } else {
            emb.embed_into(&q, &mut row, None);
        }
        for (dst, src) in embedded[i * e_dim..(i + 1) * e_dim].iter_mut().zip(&row) {
            *dst = T::from_f64(*src);
        }
    }

    let mut inputs = Vec::with_capacity(hidden + 1);
    let mut pre = Vec::with_capacity(hidden);
    let mut sig = Vec::with_capacity(hidden);
    let mut x = embedded.clone();
    for l in 0..hidden {
        let s = shapes[l];
        let mut z = vec![T::zero(); rows * s.out];
        let w = MatRef::row_major(params.weights(l), s.out, s.inp, s.inp);
        gemm(MatRef::row_major(&x, rows, s.inp, s.inp), w.t(), T::zero(), &mut z, s.out);
        let b = params.bias(l);
        for zr in z[..n * s.out].chunks_exact_mut(s.out) {
            for (v, bb) in zr.iter_mut().zip(b) {
                *v += *bb;
            }
        }
        let next_inp = shapes[l + 1].inp;
        let mut next = vec![T::zero(); rows * next_inp];
        if Some(l + 1) == skip {
            for r in 0..rows {
                next[r * next_inp + s.out..(r + 1) * next_inp]
                    .copy_from_slice(&embedded[r * e_dim..(r + 1) * e_dim]);
            }
        }
        let mut sg = vec![T::zero(); n * s.out];
        for i in 0..n {
            for c in 0..s.out {
                let zv = z[i * s.out + c];
                next[i * next_inp + c] = softplus(zv);
                sg[i * s.out + c] = sigmoid(zv);
            }
        }
        for r in n..rows {
            let i = (r - n) % n;
            for c in 0..s.out {
                next[r * next_inp + c] = sg[i * s.out + c] * z[r * s.out + c];
            }
        }
        inputs.push(x);
        pre.push(z);
        sig.push(sg);
        x = next;
    }

    let s = shapes[hidden];
    let mut out = vec![T::zero(); rows];
    gemm(
        MatRef::row_major(&x, rows, s.inp, s.inp),
        MatRef::row_major(params.weights(hidden), s.inp, 1, 1),
        T::zero(),
        &mut out,
        1,
    );
    let b = params.bias(hidden)[0];
    let pred: Vec<T> = out[..n].iter().map(|v| *v + b).collect();
    let grad = if tangents {
        (0..n).map(|i| [out[n + i], out[2 * n + i], out[3 * n + i]]).collect()
    } else {
        Vec::new()
    };
    inputs.push(x);
    Tape {
        n,
        rows,
        inputs,
        pre,
        sig,
        pred,
        grad,
    }
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂f` and `∂L/∂∇f` per point.
fn backward_chunk<T: Real>(
    params: &FieldParams<T>,
    tape: &Tape<T>,
    d_pred: &[T],
    d_grad: &[[T; 3]],
    grads: &mut [T],
) {
    let shapes = params.shapes();
    let hidden = shapes.len() - 1;
    let (n, rows) = (tape.n, tape.rows);
    let tangents = rows > n;

    let mut coef = vec![T::zero(); rows];
    coef[..n].copy_from_slice(d_pred);
    if tangents {
        for (i, g) in d_grad.iter().enumerate() {
            for j in 0..3 {
                coef[n + j * n + i] = g[j];
            }
        }
    }
    let s = shapes[hidden];
    gemm(
        MatRef::row_major(&coef, 1, rows, rows),
        MatRef::row_major(&tape.inputs[hidden], rows, s.inp, s.inp),
        T::one(),
        &mut grads[s.weight_offset..s.bias_offset],
        s.inp,
    );
    grads[s.bias_offset] += d_pred.iter().copied().sum::<T>();

    let w_out = params.weights(hidden);
    let width = s.inp;
    let mut adj = vec![T::zero(); rows * width];
    for (r, c) in coef.iter().enumerate() {
        for (a, w) in adj[r * width..(r + 1) * width].iter_mut().zip(w_out) {
            *a = *c * *w;
        }
    }

    for l in (0..hidden).rev() {
        let s = shapes[l];
        let out = s.out;
        let (z, sg) = (&tape.pre[l], &tape.sig[l]);
        // adjoint of the activations -> adjoint of the pre-activations
        for i in 0..n {
            for c in 0..out {
                let sv = sg[i * out + c];
                let mut acc = adj[i * out + c] * sv;
                if tangents {
                    let ds = sv * (T::one() - sv);
                    for j in 0..3 {
                        let r = n + j * n + i;
                        acc += adj[r * out + c] * ds * z[r * out + c];
                    }
                }
                adj[i * out + c] = acc;
            }
        }
        for r in n..rows {
            let i = (r - n) % n;
            for c in 0..out {
                adj[r * out + c] *= sg[i * out + c];
            }
        }
        let zbar = MatRef::row_major(&adj, rows, out, out);
        gemm(
            zbar.t(),
            MatRef::row_major(&tape.inputs[l], rows, s.inp, s.inp),
            T::one(),
            &mut grads[s.weight_offset..s.bias_offset],
            s.inp,
        );
        for i in 0..n {
            for c in 0..out {
                grads[s.bias_offset + c] += adj[i * out + c];
            }
        }
        if l > 0 {
            let prev_width = shapes[l - 1].out;
            let w = MatRef {
                data: params.weights(l),
                rows: out,
                cols: prev_width,
                rs: s.inp,
                cs: 1,
            };
            let mut next = vec![T::zero(); rows * prev_width];
            gemm(zbar, w, T::zero(), &mut next, prev_width);
            adj = next;
        }
    }
}

/// Field values at every point.
pub fn forward_batch<T: Real>(params: &FieldParams<T>, points: &[[T; 3]]) -> Result<Vec<T>> {
    params.check_finite()?;
    let parts: Vec<Vec<T>> = points
        .par_chunks(CHUNK)
        .map(|c| forward_chunk(params, c, false).pred)
        .collect();
    Ok(parts.concat())
}

/// Field values and exact input gradients at every point.
pub fn forward_with_gradient<T: Real>(
    params: &FieldParams<T>,
    points: &[[T; 3]],
) -> Result<(Vec<T>, Vec<[T; 3]>)> {
    params.check_finite()?;
    let parts: Vec<(Vec<T>, Vec<[T; 3]>)> = points
        .par_chunks(CHUNK)
        .map(|c| {
            let t = forward_chunk(params, c, true);
            (t.pred, t.grad)
        })
        .collect();
    let mut pred = Vec::with_capacity(points.len());
    let mut grad = Vec::with_capacity(points.len());
    for (p, g) in parts {
        pred.extend(p);
        grad.extend(g);
    }
    Ok((pred, grad))
}

/// Mean of `loss` over `points` and its exact parameter gradient, including
/// the path through the input gradient.
pub fn loss_gradients<T: Real, L: PointLoss<T>>(
    params: &FieldParams<T>,
    points: &[[T; 3]],
    loss: &L,
) -> Result<LossGradients<T>> {
    if points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    params.check_finite()?;
    let inv_n = T::from_f64(1.0 / points.len() as f64);
    let parts: Vec<Result<(Vec<T>, f64, [f64; 3])>> = points
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(k, chunk)| {
            let tape = forward_chunk(params, chunk, true);
            let mut d_pred = vec![T::zero(); chunk.len()];
            let mut d_grad = vec![[T::zero(); 3]; chunk.len()];
            let mut value = 0.0;
            let mut terms = [0.0; 3];
            for i in 0..chunk.len() {
                let index = k * CHUNK + i;
                let e = loss.eval(index, tape.pred[i], tape.grad[i]);
                let finite = e.terms.iter().chain(&e.d_grad).chain([&e.d_pred, &e.value]).all(|v| v.is_finite());
                if !finite {
                    return Err(Error::NonFinite { what: "loss", index });
                }
                d_pred[i] = e.d_pred * inv_n;
                value += Real::to_f64(e.value);
                for j in 0..3 {
                    d_grad[i][j] = e.d_grad[j] * inv_n;
                    terms[j] += Real::to_f64(e.terms[j]);
                }
            }
            let mut grads = vec![T::zero(); params.len()];
            backward_chunk(params, &tape, &d_pred, &d_grad, &mut grads);
            Ok((grads, value, terms))
        })
        .collect();
    let mut grads = vec![T::zero(); params.len()];
    let mut value = 0.0;
    let mut terms = [0.0; 3];
    for part in parts {
        let (g, v, t) = part?;
        value += v;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += *v;
        }
        for j in 0..3 {
            terms[j] += t[j];
        }
    }
    let n = points.len() as f64;
    Ok(LossGradients {
        loss: value / n,
        terms: terms.map(|t| t / n),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlpfield::{EmbeddingConfig, NetworkConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(skip: Option<usize>, seed: u64) -> FieldParams<f64> {
        let emb = EmbeddingConfig {
            frequencies: 2,
            ..Default::default()
        };
        let net = NetworkConfig {
            hidden_layers: 3,
            width: 8,
            skip_layer: skip,
            output_init_scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FieldParams::init(emb, net, &mut rng);
        // non-zero biases so every path is exercised
        for v in p.data_mut().iter_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        p
    }

    fn points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn zero_network_is_zero() {
        let p = FieldParams::<f64>::zeros(EmbeddingConfig::default(), NetworkConfig::default());
        assert_eq!(p.forward([0.3, 0.2, -1.0]).unwrap(), 0.0);
        assert_eq!(p.input_gradient([0.3, 0.2, -1.0]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn output_bias_is_constant_field() {
        let mut p = FieldParams::<f32>::zeros(EmbeddingConfig::default(), NetworkConfig::default());
        let n = p.len();
        p.data_mut()[n - 1] = 0.75;
        for q in points(5, 1) {
            assert_eq!(p.forward([q[0] as f32, q[1] as f32, q[2] as f32]).unwrap(), 0.75);
        }
    }

    #[test]
    fn batch_equals_pointwise_bitwise() {
        let p = small(Some(1), 3);
        let pts = points(600, 4);
        let batch = forward_batch(&p, &pts).unwrap();
        let (vals, grads) = forward_with_gradient(&p, &pts).unwrap();
        for (i, q) in pts.iter().enumerate() {
            assert_eq!(batch[i].to_bits(), p.forward(*q).unwrap().to_bits());
            assert_eq!(vals[i].to_bits(), batch[i].to_bits());
            assert_eq!(grads[i], p.input_gradient(*q).unwrap());
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for skip in [None, Some(1), Some(2)] {
            let p = small(skip, 5);
            for q in points(20, 6) {
                let g = p.input_gradient(q).unwrap();
                let h = 1e-4;
                for j in 0..3 {
                    let (mut a, mut b) = (q, q);
                    a[j] += h;
                    b[j] -= h;
                    let fd = (p.forward(a).unwrap() - p.forward(b).unwrap()) / (2.0 * h);
                    let rel = (fd - g[j]).abs() / g[j].abs().max(1e-3);
                    assert!(rel < 1e-5, "skip {skip:?} axis {j}: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let mut p = small(None, 1);
        p.data_mut()[3] = f64::NAN;
        assert!(matches!(p.forward([0.0; 3]), Err(Error::NonFiniteParams)));
    }

    // Quadratic in both the value and the gradient, so every path carries signal.
    struct Probe;
    impl PointLoss<f64> for Probe {
        fn eval(&self, index: usize, pred: f64, grad: [f64; 3]) -> PointLossEval<f64> {
            let target = 0.1 * index as f64;
            let t = [0.3, -0.5, 0.8];
            let gd: Vec<f64> = (0..3).map(|j| grad[j] - t[j]).collect();
            let terms = [(pred - target).powi(2), gd.iter().map(|v| v * v).sum(), 0.0];
            PointLossEval {
                value: terms.iter().sum(),
                terms,
                d_pred: 2.0 * (pred - target),
                d_grad: [2.0 * gd[0], 2.0 * gd[1], 2.0 * gd[2]],
            }
        }
    }

    fn total(p: &FieldParams<f64>, pts: &[[f64; 3]]) -> f64 {
        let (v, g) = forward_with_gradient(p, pts).unwrap();
        let mut s = 0.0;
        for i in 0..pts.len() {
            s += Probe.eval(i, v[i], g[i]).value;
        }
        s / pts.len() as f64
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for skip in [None, Some(1)] {
            let p = small(skip, 7);
            let pts = points(5, 8);
            let lg = loss_gradients(&p, &pts, &Probe).unwrap();
            assert!((lg.loss - total(&p, &pts)).abs() < 1e-12);
            let h = 1e-5;
            for k in 0..p.len() {
                let mut a = p.clone();
                a.data_mut()[k] += h;
                let mut b = p.clone();
                b.data_mut()[k] -= h;
                let fd = (total(&a, &pts) - total(&b, &pts)) / (2.0 * h);
                let g = lg.grads[k];
                let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-4, "skip {skip:?} param {k}: fd {fd} analytic {g}");
            }
        }
    }

    #[test]
    fn gradients_are_additive_over_batches() {
        let p = small(Some(2), 9);
        let pts = points(700, 10);
        // index-dependent targets: keep each half's indices by shifting the loss
        struct Shifted(usize);
        impl PointLoss<f64> for Shifted {
            fn eval(&self, index: usize, pred: f64, grad: [f64; 3]) -> PointLossEval<f64> {
                Probe.eval(index + self.0, pred, grad)
            }
        }
        let all = loss_gradients(&p, &pts, &Shifted(0)).unwrap();
        let a = loss_gradients(&p, &pts[..300], &Shifted(0)).unwrap();
        let b = loss_gradients(&p, &pts[300..], &Shifted(300)).unwrap();
        for k in 0..p.len() {
            let combined = a.grads[k] * 300.0 / 700.0 + b.grads[k] * 400.0 / 700.0;
            assert!((all.grads[k] - combined).abs() < 1e-12, "{k}");
        }
    }

    #[test]
    fn non_finite_loss_names_item() {
        struct Bad;
        impl PointLoss<f64> for Bad {
            fn eval(&self, index: usize, _: f64, _: [f64; 3]) -> PointLossEval<f64> {
                let v = if index == 3 { f64::INFINITY } else { 0.0 };
                PointLossEval {
                    value: v,
                    terms: [v, 0.0, 0.0],
                    d_pred: 0.0,
                    d_grad: [0.0; 3],
                }
            }
        }
        let p = small(None, 1);
        let err = loss_gradients(&p, &points(5, 1), &Bad).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 3, .. }));
        assert!(matches!(loss_gradients(&p, &[], &Bad), Err(Error::EmptyBatch)));
    }
}
