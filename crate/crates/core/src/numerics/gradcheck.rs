use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compare the tape gradient of scalar `f` at `x` against central finite
/// differences over every element. Returns the max relative error
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, &all)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::IndexOutOfRange {
                index: i,
                bound: x.numel(),
            });
        }
        let numeric = finite_difference(&f, x, i)?;
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    check_finite(g.value(loss), "loss")?;
    let grads = g.backward(loss)?;
    let grad = grads.get_or_zeros(xv, x.shape());
    check_finite(&grad, "gradient")?;
    Ok(grad)
}

fn eval<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x);
    let loss = f(&mut g, xv)?;
    let v = g.value(loss);
    check_finite(v, "loss")?;
    Ok(v.item())
}

fn finite_difference<F>(f: &F, x: &Tensor, i: usize) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut plus = x.clone();
    plus.data_mut()[i] += FD_STEP;
    let mut minus = x.clone();
    minus.data_mut()[i] -= FD_STEP;
    Ok((eval(f, plus)? - eval(f, minus)?) / (2.0 * FD_STEP))
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} during gradient check")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let f = |g: &mut Graph, x: Var| {
            let sq = g.mul(x, x)?;
            Ok(g.sum_all(sq))
        };
        let grad = analytic_grad(&f, &x).unwrap();
        assert!(grad.max_abs_diff(&x.scale(2.0)) < 1e-12);
        assert!(grad_check(f, &x).unwrap() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_fn(&[5], |i| i as f64);
        let f = |g: &mut Graph, _x: Var| Ok(g.constant(Tensor::scalar(3.0)));
        let grad = analytic_grad(&f, &x).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
        assert_eq!(grad_check(f, &x).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::ones(&[2]);
        let f = |g: &mut Graph, x: Var| {
            let s = g.scale(x, f64::INFINITY);
            Ok(g.sum_all(s))
        };
        assert!(matches!(grad_check(f, &x), Err(Error::NonFinite(_))));
    }
}
