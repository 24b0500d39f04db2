//! Tape-vs-finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::rng::rng;

use rand::Rng;

use super::tape::{Tape, Var};
use super::Tensor;

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the sampled coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

/// Compare tape gradients of a scalar function against central finite
/// differences `(f(θ+h) − f(θ−h)) / 2h` over a seeded coordinate subset.
///
/// `f` receives a fresh tape plus one leaf per parameter and returns the
/// scalar loss node. Checks run in `f64`; relative error uses the
/// denominator `max(|g|, |fd|, 1e-4)` so exactly-zero gradients compare
/// against finite-difference noise at a sane scale.
pub fn grad_check<F>(
    f: F,
    params: &[(&str, Tensor<f64>)],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Eval(format!("non-finite objective value {v}")));
        }
        Ok(v)
    };

    // Reference gradients from one taped forward+backward.
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::Eval("non-finite objective value".to_string()));
    }
    tape.backward(loss)?;
    let tape_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&tensors)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    // Seeded coordinate subset across all parameters.
    let total: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut r = rng(seed);
    let mut coords: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < max_coords {
            picked.insert(r.gen_range(0..total));
        }
        picked.into_iter().collect()
    };
    coords.sort_unstable();

    let mut max_rel_err = 0.0f64;
    let mut worst = (String::new(), 0usize);
    for flat in coords.iter().copied() {
        // locate (param, index)
        let mut pi = 0;
        let mut idx = flat;
        while idx >= tensors[pi].numel() {
            idx -= tensors[pi].numel();
            pi += 1;
        }
        let mut plus = tensors.clone();
        plus[pi].data_mut()[idx] += h;
        let fp = eval(&plus)?;
        let mut minus = tensors.clone();
        minus[pi].data_mut()[idx] -= h;
        let fm = eval(&minus)?;
        let fd = (fp - fm) / (2.0 * h);
        let g = tape_grads[pi].data()[idx];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = (params[pi].0.to_string(), idx);
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        coords_checked: coords.len(),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(θ) = θ² at θ = 3: analytic gradient 6.
        let theta = Tensor::scalar(3.0);
        let report = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0]);
                Ok(tape.sum_all(sq))
            },
            &[("theta", theta)],
            1e-5,
            8,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_sum_is_constant() {
        // f(θ) = sum(softmax(θ)) ≡ 1, so every gradient vanishes.
        let theta: Tensor<f64> = gaussian(&[6], 9);
        let mut tape = Tape::new();
        let v = tape.leaf(theta.clone());
        let s = tape.softmax_lastdim(v);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert!(tape.grad(v).unwrap().max_abs() < 1e-12);

        let report = grad_check(
            |tape, vars| {
                let s = tape.softmax_lastdim(vars[0]);
                Ok(tape.sum_all(s))
            },
            &[("theta", theta)],
            1e-5,
            6,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn composite_expression_passes() {
        let a: Tensor<f64> = gaussian(&[4, 3], 13);
        let b: Tensor<f64> = gaussian(&[3, 5], 14);
        let report = grad_check(
            |tape, vars| {
                let p = tape.matmul(vars[0], vars[1]);
                let n = tape.layer_norm(p, 1e-6);
                let g = tape.gelu(n);
                let s = tape.softmax_lastdim(g);
                Ok(tape.mean_all(s))
            },
            &[("a", a), ("b", b)],
            1e-5,
            27,
            7,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 27);
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_objective_errors() {
        let theta = Tensor::scalar(800.0);
        let err = grad_check(
            |tape, vars| {
                let e = tape.exp(vars[0]);
                Ok(tape.sum_all(e))
            },
            &[("theta", theta)],
            1e-5,
            1,
            0,
        );
        assert!(matches!(err, Err(Error::Eval(_))));
    }
}
