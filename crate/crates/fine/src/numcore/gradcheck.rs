//! Central finite-difference gradient checking (double precision only).

use crate::{Error, Result};

use super::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub n_checked: usize,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
}

const ABS_FLOOR: f64 = 1e-8;

/// Check `f`'s reverse-mode gradients against central differences for a
/// single input; see [`gradcheck_multi`].
pub fn gradcheck<F>(f: F, input: &Tensor<f64>, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    gradcheck_multi(f, &[input.clone()], h, tol)
}

/// Compare analytic gradients of a scalar-valued tensor function against
/// (f(x+h) - f(x-h)) / 2h, elementwise over every input.
///
/// Relative error uses max(|analytic|, |numeric|) with an absolute floor of
/// 1e-8 in the denominator; pass iff the max over all elements is < tol.
/// `f` is evaluated twice up front; a bitwise difference between the two
/// losses flags the function as non-deterministic instead of producing a
/// meaningless comparison.
pub fn gradcheck_multi<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            return Err(Error::input(
                "gradcheck",
                format!("input {i} does not require grad"),
            ));
        }
    }

    let loss_a = f(inputs)?;
    if loss_a.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss_a.shape().to_vec(),
        });
    }
    let loss_b = f(inputs)?;
    if loss_a.item().to_bits() != loss_b.item().to_bits() {
        return Err(Error::NonDeterministic(format!(
            "f(x) = {} then {}",
            loss_a.item(),
            loss_b.item()
        )));
    }

    // Analytic gradients.
    for t in inputs {
        t.zero_grad();
    }
    loss_a.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad()).collect();

    // Central differences, one element at a time.
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut n_checked = 0usize;
    for (ti, t) in inputs.iter().enumerate() {
        let base = t.to_vec();
        for ei in 0..base.len() {
            let mut plus = base.clone();
            plus[ei] += h;
            t.set_data(plus);
            let fp = f(inputs)?.item();

            let mut minus = base.clone();
            minus[ei] -= h;
            t.set_data(minus);
            let fm = f(inputs)?.item();

            t.set_data(base.clone());

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((ti, ei));
            }
            n_checked += 1;
        }
    }

    Ok(GradcheckReport {
        max_rel_err,
        pass: max_rel_err < tol,
        n_checked,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn quadratic_passes_tightly() {
        // f(x) = x . x at x = 3
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let report = gradcheck(|xs| Ok(xs[0].square().sum_all()), &x, 1e-5, 1e-8).unwrap();
        assert!(report.pass, "rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn wrong_gradient_fails() {
        // Intentionally broken VJP: forward x^2, backward claims d/dx = x.
        let x = Tensor::param(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let broken = |xs: &[Tensor<f64>]| -> crate::Result<Tensor<f64>> {
            let x = xs[0].clone();
            let data: Vec<f64> = x.data().iter().map(|v| v * v).collect();
            let xc = x.clone();
            let out = Tensor::from_op(
                vec![3],
                data,
                vec![x],
                Box::new(move |_, g| {
                    let xd = xc.data();
                    vec![Some(g.iter().zip(xd.iter()).map(|(g, x)| g * x).collect())]
                }),
            );
            Ok(out.sum_all())
        };
        let report = gradcheck(broken, &x, 1e-5, 1e-4).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn nondeterministic_function_is_flagged() {
        use std::cell::Cell;
        let x = Tensor::param(&[1], vec![1.0]).unwrap();
        let counter = Cell::new(0.0f64);
        let f = |xs: &[Tensor<f64>]| -> crate::Result<Tensor<f64>> {
            counter.set(counter.get() + 1.0);
            Ok(xs[0].scale(counter.get()).sum_all())
        };
        assert!(matches!(
            gradcheck(f, &x, 1e-5, 1e-4),
            Err(crate::Error::NonDeterministic(_))
        ));
    }

    #[test]
    fn multi_input_matmul_chain() {
        let a = Tensor::param(&[2, 3], vec![0.1, -0.4, 0.7, 0.2, 0.9, -0.3]).unwrap();
        let b = Tensor::param(&[3, 2], vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.4]).unwrap();
        let f = |xs: &[Tensor<f64>]| -> crate::Result<Tensor<f64>> {
            Ok(xs[0].matmul(&xs[1])?.tanh_elem().square().sum_all())
        };
        let report = gradcheck_multi(f, &[a, b], 1e-5, 1e-6).unwrap();
        assert!(report.pass, "rel err {}", report.max_rel_err);
    }
}
