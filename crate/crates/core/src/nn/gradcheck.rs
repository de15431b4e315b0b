use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModuleParams, NnError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries checked per tensor; smaller tensors are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_tensor: 12,
            seed: 0,
        }
    }
}

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the scalar objective at the given parameters and returns it
/// together with the analytic per-tensor gradients. The result is the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over the sampled
/// entries.
pub fn gradient_check<F>(params: &ModuleParams, opts: &GradCheckOptions, f: F) -> Result<f64, NnError>
where
    F: Fn(&ModuleParams) -> Result<(f64, Vec<Vec<f64>>), NnError>,
{
    let (_, analytic) = f(params)?;
    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for ti in 0..params.len() {
        let n = params.tensors()[ti].len();
        let picks: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for k in picks {
            let orig = work.tensors()[ti].values[k];
            work.tensors_mut()[ti].values[k] = orig + opts.eps;
            let (plus, _) = f(&work)?;
            work.tensors_mut()[ti].values[k] = orig - opts.eps;
            let (minus, _) = f(&work)?;
            work.tensors_mut()[ti].values[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(ti).and_then(|g| g.get(k)).copied().unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Scale applied to O(1) training losses before checking. Central
/// differences of an O(1) value carry ~1e-11 of round-off, which the fixed
/// 1e-8 floor would report as a large relative error on entries whose true
/// gradient is ~0; shrinking the objective keeps round-off below the floor.
pub const CHECK_SCALE: f64 = 1e-3;

/// Multiplies a `(loss, gradients)` pair by [`CHECK_SCALE`].
pub fn scaled(loss: f64, mut grads: Vec<Vec<f64>>) -> (f64, Vec<Vec<f64>>) {
    for g in &mut grads {
        for x in g.iter_mut() {
            *x *= CHECK_SCALE;
        }
    }
    (loss * CHECK_SCALE, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp, Tape};

    #[test]
    fn quadratic_form_is_exact() {
        let mut p = ModuleParams::new(0);
        p.add_tensor("w", vec![3], vec![0.3, -1.1, 2.0]).unwrap();
        // f(w) = sum_i c_i w_i^2
        let c = [1.0, 2.5, 0.5];
        let err = gradient_check(&p, &GradCheckOptions::default(), |p| {
            let w = &p.tensors()[0].values;
            let v = w.iter().zip(&c).map(|(w, c)| c * w * w).sum();
            let g = w.iter().zip(&c).map(|(w, c)| 2.0 * c * w).collect();
            Ok((v, vec![g]))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn mlp_cross_entropy_gradient() {
        for seed in 0..10 {
            let mut p = ModuleParams::new(seed);
            let mlp = Mlp::new(&mut p, "m", &[4, 6, 3], Activation::Tanh, Activation::Identity).unwrap();
            let x = vec![0.2, -0.7, 1.1, 0.05];
            let opts = GradCheckOptions {
                seed,
                ..Default::default()
            };
            let err = gradient_check(&p, &opts, |p| {
                let mut t = Tape::new();
                let s = t.bind(p);
                let xv = t.input(x.clone());
                let y = mlp.forward(&mut t, s, xv)?;
                let l = t.softmax_ce(y, 1)?;
                Ok((t.scalar(l), t.backward(l).into_store(s)))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
