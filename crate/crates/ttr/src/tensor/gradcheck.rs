//! Central finite-difference gradient verification.
//!
//! The checker evaluates the scalar function under test twice per probed
//! coordinate with only forward passes, so it stays independent of the
//! backward implementation it validates.

use super::{Element, Tape, Tensor, Var};
use crate::error::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn eval_loss<F, L>(f: &L, points: &[Tensor<F>], requires_grad: bool) -> Result<(Tape<F>, Vec<Var>, Var)>
where
    F: Element,
    L: Fn(&mut Tape<F>, &[Var]) -> Result<Var> + ?Sized,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p, requires_grad)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
///
/// A NaN in either estimate reports as infinity so any tolerance assert fails.
pub fn grad_check<F, L>(f: &L, points: &[Tensor<F>], step: f64) -> Result<f64>
where
    F: Element,
    L: Fn(&mut Tape<F>, &[Var]) -> Result<Var> + ?Sized,
{
    let all: Vec<Vec<usize>> = points.iter().map(|p| (0..p.numel()).collect()).collect();
    grad_check_coords(f, points, step, &all)
}

/// Like [`grad_check`] but probing at most `coords_per_tensor` randomly
/// chosen coordinates of each input, for functions with many parameters.
pub fn grad_check_sampled<F, L>(
    f: &L,
    points: &[Tensor<F>],
    step: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Element,
    L: Fn(&mut Tape<F>, &[Var]) -> Result<Var> + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = points
        .iter()
        .map(|p| {
            let mut idx: Vec<usize> = (0..p.numel()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(coords_per_tensor);
            idx
        })
        .collect();
    grad_check_coords(f, points, step, &coords)
}

fn grad_check_coords<F, L>(
    f: &L,
    points: &[Tensor<F>],
    step: f64,
    coords: &[Vec<usize>],
) -> Result<f64>
where
    F: Element,
    L: Fn(&mut Tape<F>, &[Var]) -> Result<Var> + ?Sized,
{
    // Analytic gradients via one recorded pass.
    let (mut tape, vars, loss) = eval_loss(f, points, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<F>> = vars
        .iter()
        .map(|v| tape.grad(*v).expect("leaf gradient populated").to_vec())
        .collect();

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<F>> = points.to_vec();
    for (ti, idx_list) in coords.iter().enumerate() {
        for &ci in idx_list {
            let orig = perturbed[ti].data()[ci];
            let h = F::from_f64(step);

            perturbed[ti].data_mut()[ci] = orig + h;
            let (tp, _, lp) = eval_loss(f, &perturbed, false)?;
            let fp = tp.scalar_value(lp).as_f64();

            perturbed[ti].data_mut()[ci] = orig - h;
            let (tm, _, lm) = eval_loss(f, &perturbed, false)?;
            let fm = tm.scalar_value(lm).as_f64();

            perturbed[ti].data_mut()[ci] = orig;

            let fd = (fp - fm) / (2.0 * step);
            let an = analytic[ti][ci].as_f64();
            if !fd.is_finite() || !an.is_finite() {
                return Ok(f64::INFINITY);
            }
            let rel = (an - fd).abs() / an.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        // f = dot(w, w) at w = (1, 2)
        let w = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            &|t, vs| {
                let sq = t.mul(vs[0], vs[0])?;
                Ok(t.sum_all(sq))
            },
            &[w],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-6, "quadratic grad check err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::<f64>::new(vec![3], vec![0.3, -0.2, 1.1]).unwrap();
        let err = grad_check(
            &|t, vs| {
                let z = t.scale(vs[0], 0.0);
                Ok(t.sum_all(z))
            },
            &[w],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sampled_subset_matches_full_on_small_input() {
        let w = Tensor::<f64>::new(vec![4], vec![0.5, -0.25, 0.75, 1.5]).unwrap();
        let f = |t: &mut Tape<f64>, vs: &[Var]| {
            let e = t.exp(vs[0]);
            Ok(t.sum_all(e))
        };
        let full = grad_check(&f, std::slice::from_ref(&w), 1e-4).unwrap();
        let sampled = grad_check_sampled(&f, &[w], 1e-4, 4, 7).unwrap();
        assert!((full - sampled).abs() < 1e-12);
    }
}
