//! Central finite-difference gradient checking harness.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

/// Compares analytic gradients against central finite differences.
///
/// `f` must be a pure scalar function of the given leaf parameters. When
/// `max_probes` is set, that many parameter elements are sampled uniformly
/// (seeded); otherwise every element is probed. Returns the maximum over
/// probed elements of `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// Functions with kinks (e.g. `abs` at 0) are unreliable probe points; callers
/// should offset inputs away from nondifferentiable loci.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    max_probes: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            msg: format!("step must be positive, got {step}"),
        });
    }
    for p in params {
        if !p.is_leaf() {
            return Err(TensorError::InvalidArgument {
                op: "finite_difference_check",
                msg: "all params must be leaf tensors".into(),
            });
        }
        p.zero_grad();
    }

    let loss = f(params)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.take_grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut probes: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ei| (pi, ei)))
        .collect();
    if let Some(k) = max_probes {
        if k < probes.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            probes.partial_shuffle(&mut rng, k);
            probes.truncate(k);
        }
    }

    let mut max_err: f64 = 0.0;
    for (pi, ei) in probes {
        let eval = |delta: f64| -> Result<f64> {
            let mut perturbed: Vec<Tensor> = params.to_vec();
            let mut data = params[pi].data().to_vec();
            data[ei] += delta;
            perturbed[pi] = Tensor::param(params[pi].shape(), data)?;
            Ok(f(&perturbed)?.item())
        };
        let hi = eval(step)?;
        let lo = eval(-step)?;
        let numeric = (hi - lo) / (2.0 * step);
        let a = analytic[pi][ei];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_tiny_error() {
        // f(x) = x^2 at x = 3: analytic derivative 6
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let err = finite_difference_check(
            |ps| Ok(ps[0].mul(&ps[0])?.sum_all()),
            &[x],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |ps| Ok(ps[0].mul_scalar(0.0).sum_all()),
            &[x],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn primitive_ops_pass_gradcheck() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        // offset away from 0 so abs has no kink at the probe points
        let vals: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                if v >= 0.0 {
                    v + 0.2
                } else {
                    v - 0.2
                }
            })
            .collect();
        let x = Tensor::param(&[12], vals).unwrap();
        let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
            ("abs", Box::new(|t: &Tensor| t.abs())),
            ("exp", Box::new(|t: &Tensor| t.exp())),
            ("silu", Box::new(|t: &Tensor| t.silu())),
            ("gelu", Box::new(|t: &Tensor| t.gelu())),
            ("gelu_erf", Box::new(|t: &Tensor| t.gelu_erf())),
            ("tanh", Box::new(|t: &Tensor| t.tanh())),
            ("softmax", Box::new(|t: &Tensor| t.softmax_last())),
            (
                "log(abs)+mean",
                Box::new(|t: &Tensor| t.abs().log().mean_all()),
            ),
        ];
        // the exp wrapper keeps the reduction non-degenerate (a plain sum of
        // softmax outputs is constant, which starves the check of signal)
        for (name, op) in cases {
            let err = finite_difference_check(
                |ps| Ok(op(&ps[0]).exp().sum_all()),
                std::slice::from_ref(&x),
                1e-5,
                None,
                0,
            )
            .unwrap();
            // threshold leaves headroom for FD roundoff on the small
            // off-diagonal softmax derivatives
            assert!(err < 1e-5, "{name}: err = {err}");
        }
    }

    #[test]
    fn structured_ops_pass_gradcheck() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let mk = |shape: &[usize], rng: &mut rand::rngs::StdRng| {
            let n = shape.iter().product();
            Tensor::param(
                shape,
                (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect::<Vec<_>>(),
            )
            .unwrap()
        };
        // conv3d
        let x = mk(&[2, 3, 3, 2], &mut rng);
        let w = mk(&[2, 2, 3, 3, 1], &mut rng);
        let b = mk(&[2], &mut rng);
        let err = finite_difference_check(
            |ps| Ok(ps[0].conv3d(&ps[1], &ps[2])?.mul(&ps[0].conv3d(&ps[1], &ps[2])?)?.sum_all()),
            &[x, w, b],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "conv3d: err = {err}");

        // group_norm
        let x = mk(&[4, 5], &mut rng);
        let gamma = mk(&[4], &mut rng);
        let beta = mk(&[4], &mut rng);
        let err = finite_difference_check(
            |ps| Ok(ps[0].group_norm(2, &ps[1], &ps[2], 1e-5)?.exp().sum_all()),
            &[x, gamma, beta],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "group_norm: err = {err}");

        // matmul / linear / scale_shift / resize / concat
        let a = mk(&[3, 4], &mut rng);
        let bm = mk(&[5, 4], &mut rng);
        let err = finite_difference_check(
            |ps| Ok(ps[0].matmul(&ps[1], true)?.softmax_last().exp().sum_all()),
            &[a, bm],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul_nt: err = {err}");

        let x = mk(&[2, 4, 2, 2], &mut rng);
        let sc = mk(&[2], &mut rng);
        let sh = mk(&[2], &mut rng);
        let err = finite_difference_check(
            |ps| {
                let y = ps[0].scale_shift(&ps[1], &ps[2])?;
                let z = y.resize_trilinear([2, 1, 1])?;
                let c = Tensor::concat(&[z.clone(), z], 0)?;
                Ok(c.silu().mean_all())
            },
            &[x, sc, sh],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "scale_shift/resize/concat: err = {err}");
    }
}
