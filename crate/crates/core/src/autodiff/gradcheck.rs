//! Central finite-difference gradient checking.
//!
//! Probes that change the tape's kink fingerprint (a ReLU sign or a max-pool
//! switch flips between `x - eps` and `x + eps`) are rejected with
//! [`Error::KinkCrossed`]; callers resample the point and try again.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{BatchNormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// One forward evaluation: loss value and kink fingerprint.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    pub fingerprint: u64,
}

/// Compares `analytic[c]` against central differences for each coordinate in
/// `coords`. `eval(c, delta)` must evaluate the function with coordinate `c`
/// shifted by `delta`.
pub fn compare_coordinates<F>(
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    base_fingerprint: u64,
    mut eval: F,
) -> Result<f64>
where
    F: FnMut(usize, f64) -> Result<Probe>,
{
    let mut worst = 0.0f64;
    for &c in coords {
        let plus = eval(c, eps)?;
        let minus = eval(c, -eps)?;
        if plus.fingerprint != base_fingerprint || minus.fingerprint != base_fingerprint {
            return Err(Error::KinkCrossed);
        }
        let numeric = (plus.value - minus.value) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[c], numeric));
    }
    Ok(worst)
}

/// Maximum relative error between the tape gradient of scalar `f` at `input`
/// and central differences over every coordinate.
pub fn gradcheck<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_leaves(|tape, xs| f(tape, xs[0]), std::slice::from_ref(input), eps)
}

/// [`gradcheck`] over several differentiable inputs at once; every
/// coordinate of every input is probed.
pub fn gradcheck_leaves<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::with_kink_tracking();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let y = f(&mut tape, &vars)?;
        Ok((tape, vars, y))
    };
    let (tape, vars, y) = run(inputs)?;
    let base = tape.kink_fingerprint();
    let grads = tape.backward(y)?;

    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = (0..n).collect();
        let err = compare_coordinates(&analytic, &coords, eps, base, |c, delta| {
            let orig = probe[i].data()[c];
            probe[i].data_mut()[c] = orig + delta;
            let out = run(&probe);
            probe[i].data_mut()[c] = orig;
            let (tape, _, y) = out?;
            Ok(Probe { value: tape.value(y).item()?, fingerprint: tape.kink_fingerprint() })
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`gradcheck`] with kink rejection: draws inputs from `sample` until a draw
/// passes without crossing a kink. Returns the error and the number of
/// rejected draws.
pub fn gradcheck_resampled<F, S>(f: F, mut sample: S, eps: f64, max_draws: usize) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    S: FnMut() -> Tensor,
{
    for rejected in 0..max_draws {
        match gradcheck(&f, &sample(), eps) {
            Err(Error::KinkCrossed) => continue,
            other => return other.map(|e| (e, rejected)),
        }
    }
    Err(Error::KinkCrossed)
}

/// Outcome of checking one primitive.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Draws discarded because a probe crossed a kink.
    pub rejected_draws: usize,
}

const MAX_DRAWS: usize = 20;

/// Fixed, non-uniform projection to a scalar, so that every output coordinate
/// contributes a distinct weight to the checked loss.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    tape.weighted_sum(y, &w)
}

struct Checker {
    rng: ChaCha8Rng,
    eps: f64,
    out: Vec<PrimitiveCheck>,
}

impl Checker {
    fn check<F>(&mut self, name: &'static str, shapes: &[&[usize]], f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        for rejected in 0..MAX_DRAWS {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    let data = (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
                    Tensor::new(s.to_vec(), data)
                })
                .collect::<Result<_>>()?;
            match gradcheck_leaves(&f, &inputs, self.eps) {
                Err(Error::KinkCrossed) => continue,
                Err(e) => return Err(e),
                Ok(max_rel_error) => {
                    self.out.push(PrimitiveCheck { name, max_rel_error, rejected_draws: rejected });
                    return Ok(());
                }
            }
        }
        Err(Error::KinkCrossed)
    }
}

/// Gradient-checks every differentiable primitive on small random inputs.
pub fn check_primitives(seed: u64, eps: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut c = Checker { rng: ChaCha8Rng::seed_from_u64(seed), eps, out: Vec::new() };
    c.check("add", &[&[2, 3], &[2, 3]], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y)
    })?;
    c.check("scale", &[&[5]], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y)
    })?;
    c.check("sum", &[&[2, 2, 3]], |t, v| Ok(t.sum(v[0])))?;
    c.check("reshape", &[&[2, 6]], |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y)
    })?;
    c.check("relu", &[&[4, 5]], |t, v| {
        let y = t.relu(v[0]);
        project(t, y)
    })?;
    c.check("dense", &[&[3, 4], &[5, 4], &[5]], |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        project(t, y)
    })?;
    c.check("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(t, y)
    })?;
    c.check("conv3d", &[&[1, 2, 3, 4, 4], &[2, 2, 3, 3, 3], &[2]], |t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
        project(t, y)
    })?;
    c.check("batch_norm_train_2d", &[&[3, 2, 2, 2], &[2], &[2]], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?;
        project(t, y)
    })?;
    c.check("batch_norm_train_3d", &[&[2, 2, 2, 2, 2], &[2], &[2]], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?;
        project(t, y)
    })?;
    c.check("batch_norm_eval", &[&[2, 3, 2, 2], &[3], &[3]], |t, v| {
        let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
        let mode = BatchNormMode::Eval { mean: &mean, var: &var };
        let (y, _) = t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?;
        project(t, y)
    })?;
    c.check("avg_pool_2d", &[&[1, 2, 4, 5]], |t, v| {
        let y = t.avg_pool(v[0], 2)?;
        project(t, y)
    })?;
    c.check("avg_pool_3d", &[&[1, 1, 3, 4, 4]], |t, v| {
        let y = t.avg_pool(v[0], 3)?;
        project(t, y)
    })?;
    c.check("max_pool2d", &[&[1, 2, 5, 5]], |t, v| {
        let y = t.max_pool2d(v[0], 3, 2, 1)?;
        project(t, y)
    })?;
    c.check("global_avg_pool", &[&[2, 3, 2, 3]], |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y)
    })?;
    c.check("softmax", &[&[3, 4]], |t, v| {
        let y = t.softmax(v[0])?;
        project(t, y)
    })?;
    c.check("cross_entropy", &[&[3, 4]], |t, v| t.cross_entropy(v[0], &[0, 3, 1]))?;
    c.check("binary_cross_entropy", &[&[4, 1]], |t, v| t.binary_cross_entropy(v[0], &[0, 1, 1, 0]))?;
    c.check("binary_cross_entropy_two_logit", &[&[3, 2]], |t, v| t.binary_cross_entropy(v[0], &[1, 0, 1]))?;
    c.check("mse", &[&[2, 3], &[2, 3]], |t, v| t.mse(v[0], v[1]))?;
    Ok(c.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 4.0, 0.0, 2.5]).unwrap();
        let err = gradcheck(
            |tape, x| {
                let c = tape.constant(&Tensor::zeros(&[5]));
                let m = tape.mse(x, c)?; // mean(x^2)
                Ok(tape.scale(m, 2.5)) // 0.5 * |x|^2
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_at_kink_is_rejected() {
        let x = Tensor::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap();
        let f = |tape: &mut Tape, x: Var| {
            let r = tape.relu(x);
            Ok(tape.sum(r))
        };
        assert!(matches!(gradcheck(f, &x, 1e-6), Err(Error::KinkCrossed)));

        let mut draws = vec![
            Tensor::new(vec![3], vec![0.5, -0.5, 1.0]).unwrap(),
            Tensor::new(vec![3], vec![1e-9, 1.0, 1.0]).unwrap(),
        ];
        let (err, rejected) = gradcheck_resampled(f, || draws.pop().unwrap(), 1e-6, 5).unwrap();
        assert_eq!(rejected, 1);
        assert!(err < 1e-9);
    }
}
