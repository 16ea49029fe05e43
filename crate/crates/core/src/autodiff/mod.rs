//! Minimal reverse-mode automatic differentiation over rank-4 tensors.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{factorized_masses, Graph, Precision, Var, FACTORIZED_MAX, FACTORIZED_MIN, FACTORIZED_SYMBOLS};
pub use kernels::ConvGeom;
pub use tensor::{Shape, Tensor};

use crate::error::{Error, Result};

/// Round half to even with a canonical `+0.0`, so quantized tensors compare
/// bitwise equal to values rebuilt from integer symbols.
pub fn round_symbol(v: f64) -> f64 {
    v.round_ties_even() + 0.0
}

fn round_to_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Gradient check of a scalar function of several tensors.
///
/// The analytic gradient comes from an f32-storage graph; the reference is
/// the central difference `(f(x + h e) - f(x - h e)) / 2h` recomputed on an
/// f64-storage graph. Returns the largest `|analytic - numeric| / (|analytic| + 1e-8)`
/// over all coordinates of all inputs.
pub fn grad_check_many<F>(build: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let points: Vec<Tensor> = points.iter().map(round_to_f32).collect();

    let run = |precision: Precision, pts: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::with_precision(precision);
        let vars = pts.iter().map(|p| g.leaf(p.clone(), grads)).collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(pts)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, gs))
    };

    let (first, analytic) = run(Precision::F32, &points, true)?;
    let (second, _) = run(Precision::F32, &points, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::InvalidArgument(format!(
            "function is not deterministic: {first} then {second}"
        )));
    }

    let mut worst = 0.0f64;
    let mut work = points.clone();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..points[pi].numel() {
            let x0 = points[pi].data()[i];
            work[pi].data_mut()[i] = x0 + h;
            let (fp, _) = run(Precision::F64, &work, false)?;
            work[pi].data_mut()[i] = x0 - h;
            let (fm, _) = run(Precision::F64, &work, false)?;
            work[pi].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}

/// [`grad_check_many`] for a function of a single tensor.
pub fn grad_check<F>(build: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| build(g, v[0]), std::slice::from_ref(point), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: Shape, rng: &mut impl Rng, scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    #[test]
    fn add_scale_mean_basics() {
        let mut g = Graph::new();
        let s = Shape::new(1, 1, 2, 2);
        let x = g.leaf(t(s, &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let z = g.constant(Tensor::zeros(s)).unwrap();
        let a = g.add(x, z).unwrap();
        assert_eq!(g.value(a), g.value(x));
        let one = g.scale(x, 1.0).unwrap();
        assert_eq!(g.value(one), g.value(x));
        let m = g.reduce_mean(x).unwrap();
        assert_eq!(g.value(m).item(), 2.5);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 1, 4), 1.0), true).unwrap();
        let m = g.reduce_mean(x).unwrap();
        g.backward(m).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5; 4]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn mse_divides_by_batch() {
        let mut g = Graph::new();
        let s = Shape::new(1, 1, 1, 3);
        let a = g.constant(t(s, &[0.0, 0.0, 0.0])).unwrap();
        let b = g.constant(t(s, &[2.0, 0.0, 0.0])).unwrap();
        let l = g.mse_loss(a, b).unwrap();
        assert_eq!(g.value(l).item(), 4.0);

        let s2 = Shape::new(2, 1, 1, 2);
        // per-sample squared norms 3 and 5
        let a = g.constant(t(s2, &[1.0, 2f64.sqrt(), 2.0, 1.0])).unwrap();
        let b = g.constant(Tensor::zeros(s2)).unwrap();
        let l = g.mse_loss(a, b).unwrap();
        assert!((g.value(l).item() - 4.0).abs() < 1e-6);

        let x = g.leaf(t(s, &[0.5, 1.0, 2.0]), true).unwrap();
        let c = g.constant(t(s, &[0.5, 1.0, 2.0])).unwrap();
        let l = g.mse_loss(x, c).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        let b = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 3))).unwrap();
        assert!(g.add(a, b).is_err());
        assert!(g.mse_loss(a, b).is_err());
        let w = g.constant(Tensor::zeros(Shape::new(2, 3, 3, 3))).unwrap();
        assert!(g.conv2d(a, w, None, 1, 1).is_err());
    }

    #[test]
    fn conv_known_values() {
        // 1x1x3x3 input, 3x3 all-ones kernel, padding 1: each output is a
        // neighbourhood sum.
        let mut g = Graph::new();
        let x = g.constant(t(Shape::new(1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.])).unwrap();
        let w = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[12., 21., 16., 27., 45., 33., 24., 39., 28.]);
        // stride 2, k=2, no padding
        let w2 = g.constant(Tensor::full(Shape::new(1, 1, 2, 2), 1.0)).unwrap();
        let x4 = g.constant(Tensor::from_fn(Shape::new(1, 1, 4, 4), |i| i as f64)).unwrap();
        let y2 = g.conv2d(x4, w2, None, 2, 0).unwrap();
        assert_eq!(g.value(y2).data(), &[10., 18., 42., 50.]);
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        let mut rng = crate::rng::stream(1, "adjoint");
        for &(cin, cout, k, s, p, hw) in &[(2, 3, 3, 1, 1, 5), (3, 2, 4, 2, 1, 8), (1, 2, 3, 2, 0, 7)] {
            let mut g = Graph::with_precision(Precision::F64);
            let x = random(Shape::new(2, cin, hw, hw), &mut rng, 1.0);
            let w = random(Shape::new(cout, cin, k, k), &mut rng, 1.0);
            let xv = g.constant(x.clone()).unwrap();
            let wv = g.constant(w).unwrap();
            let y = g.conv2d(xv, wv, None, s, p).unwrap();
            let ys = g.shape(y);
            let u = random(ys, &mut rng, 1.0);
            let uv = g.constant(u.clone()).unwrap();
            let back = g.conv_transpose2d(uv, wv, None, s, p).unwrap();
            // the transposed output may be smaller than x when the forward
            // conv dropped trailing rows
            let bs = g.shape(back);
            let mut lhs = 0.0;
            for ci in 0..cin {
                for n in 0..2 {
                    for i in 0..bs.h {
                        for j in 0..bs.w {
                            lhs += x.get(n, ci, i, j) * g.value(back).get(n, ci, i, j);
                        }
                    }
                }
            }
            let rhs = g.value(y).dot(&u);
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn grad_check_identity_sum_is_exact() {
        let p = Tensor::from_fn(Shape::new(1, 2, 2, 2), |i| i as f64 * 0.25);
        let err = grad_check(|g, x| g.reduce_mean(x), &p, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = crate::rng::stream(2, "linearity");
        let p = random(Shape::new(1, 2, 4, 4), &mut rng, 1.0);
        let q = random(Shape::new(1, 2, 4, 4), &mut rng, 1.0);
        let grad_of = |a: f64, b: f64| {
            let mut g = Graph::with_precision(Precision::F64);
            let x = g.leaf(p.clone(), true).unwrap();
            let c = g.constant(q.clone()).unwrap();
            let f = g.mse_loss(x, c).unwrap();
            let act = g.leaky_relu(x, 0.01).unwrap();
            let gg = g.reduce_mean(act).unwrap();
            let fa = g.scale(f, a).unwrap();
            let gb = g.scale(gg, b).unwrap();
            let l = g.add(fa, gb).unwrap();
            g.backward(l).unwrap();
            g.grad(x).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 32])
        };
        let (gf, gg, gc) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.0, -3.0));
        for i in 0..32 {
            assert!((gc[i] - (2.0 * gf[i] - 3.0 * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn pruned_branch_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 1, 2), 1.0), true).unwrap();
        let frozen = g.leaf(Tensor::full(Shape::new(1, 1, 1, 2), 2.0), false).unwrap();
        let m = g.mse_loss(x, frozen).unwrap();
        let z = g.scale(m, 0.0).unwrap();
        assert!(!g.requires_grad(z));
        let a = g.reduce_mean(x).unwrap();
        let l = g.add(a, z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5, 0.5]);
        assert!(g.grad(frozen).is_none());
    }

    #[test]
    fn storage_precision_rounds_outputs() {
        let v = 0.1f64;
        let mut g32 = Graph::new();
        let a = g32.constant(Tensor::scalar(v)).unwrap();
        assert_eq!(g32.value(a).item(), v as f32 as f64);
        let mut g64 = Graph::with_precision(Precision::F64);
        let b = g64.constant(Tensor::scalar(v)).unwrap();
        assert_eq!(g64.value(b).item(), v);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e38)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::Numeric(_))));
        let p = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.rate_bits(&[p], 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(Shape::new(2, 4, 1, 1)), true).unwrap();
        let ce = g.softmax_cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-6);
        assert!(g.softmax_cross_entropy(l, &[0, 4]).is_err());
    }

    #[test]
    fn gaussian_likelihood_floor_and_range() {
        let mut g = Graph::new();
        let s = Shape::new(1, 1, 1, 2);
        let y = g.leaf(t(s, &[0.0, 40.0]), true).unwrap();
        let mu = g.constant(Tensor::zeros(s)).unwrap();
        let sig = g.constant(Tensor::full(s, 1.0)).unwrap();
        let p = g.gaussian_likelihood(y, mu, sig).unwrap();
        let pv = g.value(p).data();
        assert!((pv[0] - 0.382_924_922_548_026).abs() < 1e-6);
        assert_eq!(pv[1], crate::prob::P_FLOOR);
        let r = g.rate_bits(&[p], 1).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(y).unwrap().data()[1], 0.0);
    }

    #[test]
    fn factorized_likelihood_uniform_prior() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(Shape::new(1, FACTORIZED_SYMBOLS, 1, 1)), true).unwrap();
        let z = g.constant(t(Shape::new(1, 1, 1, 3), &[0.0, -64.0, 63.0])).unwrap();
        let p = g.factorized_likelihood(z, logits).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 128.0).abs() < 1e-9);
        }
    }
}
