//! Central-difference verification of the analytic adjoints.
//!
//! Outputs are contracted with a fixed random cotangent `r` and the scalar
//! `sum(r * f(x))` is accumulated in `f64`, so the only single-precision
//! noise left is the rounding of the op outputs themselves. The error measure
//! is the norm-wise relative error `|a - n| / max(|a|, |n|)` of the full
//! gradient vector (all inputs concatenated).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    causal_mask, multi_head_attention, AttentionWeights, Graph, NnError, Parameter, Tensor, Var,
};

pub const DEFAULT_STEP: f32 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Relative error of each checked input (or parameter) on its own;
    /// diagnostic only, small gradients are dominated by rounding noise.
    pub errors: Vec<f64>,
    /// Relative error of the full gradient, all inputs concatenated.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Location of the first non-finite analytic gradient, if any.
    pub failure: Option<String>,
    /// Entries left out because a perturbation moved a ReLU input across
    /// zero, where the central difference is not a derivative estimate.
    pub skipped: usize,
}

impl GradCheckReport {
    fn new(
        name: &str,
        max_rel_error: f64,
        errors: Vec<f64>,
        tolerance: f64,
        failure: Option<String>,
    ) -> Self {
        let passed = failure.is_none() && max_rel_error < tolerance;
        Self {
            name: name.to_string(),
            errors,
            max_rel_error,
            tolerance,
            passed,
            failure,
            skipped: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f32,
    pub tolerance: f64,
    pub seed: u64,
    /// Multiplier applied to the analytic gradient before comparison.
    /// Anything other than 1 is a negative control.
    pub analytic_scale: f32,
    pub rms_floor: f64,
}

impl GradCheck {
    pub fn new(tolerance: f64, seed: u64) -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance,
            seed,
            analytic_scale: 1.0,
            rms_floor: OUTPUT_NOISE_RMS_FLOOR,
        }
    }

    /// Check the gradient of `f` with respect to every element of every input.
    pub fn check_inputs<F>(
        &self,
        name: &str,
        inputs: &[Tensor],
        f: F,
    ) -> Result<GradCheckReport, NnError>
    where
        F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, NnError>,
    {
        let eval = |inputs: &[Tensor]| -> Result<Vec<f32>, NnError> {
            let mut g = Graph::new(&[]);
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).data().to_vec())
        };
        let mut g = Graph::new(&[]);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.input(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut g, &vars)?;
        let cot = self.cotangent(g.value(out).numel());
        let grads = g.backward(out, Some(&cot))?;

        let mut errors = Vec::with_capacity(inputs.len());
        let (mut all_analytic, mut all_numeric) = (Vec::new(), Vec::new());
        let mut failure = None;
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, v) in vars.iter().enumerate() {
            let n = inputs[i].numel();
            let analytic: Vec<f32> = match grads.get(*v) {
                Some(a) => a.iter().map(|x| x * self.analytic_scale).collect(),
                None => vec![0.0; n],
            };
            if let Some(j) = analytic.iter().position(|x| !x.is_finite()) {
                failure.get_or_insert(format!(
                    "{name}: non-finite gradient at input {i}, element {j}"
                ));
            }
            let mut numeric = vec![0.0f64; n];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let plus = contract(&eval(&work)?, &cot);
                work[i].data_mut()[j] = orig - self.step;
                let minus = contract(&eval(&work)?, &cot);
                work[i].data_mut()[j] = orig;
                *slot = (plus - minus) / (2.0 * self.step as f64);
            }
            errors.push(relative_error(&analytic, &numeric, self.rms_floor));
            all_analytic.extend(analytic);
            all_numeric.extend(numeric);
        }
        let overall = relative_error(&all_analytic, &all_numeric, self.rms_floor);
        Ok(GradCheckReport::new(
            name,
            overall,
            errors,
            self.tolerance,
            failure,
        ))
    }

    /// Check a scalar loss with respect to a random sample of parameter
    /// entries (`fraction` of each tensor, at least one entry).
    pub fn check_params<F>(
        &self,
        name: &str,
        params: &mut [Parameter],
        fraction: f64,
        f: F,
    ) -> Result<GradCheckReport, NnError>
    where
        F: Fn(&mut Graph<'_>) -> Result<Var, NnError>,
    {
        let analytic_all: Vec<Option<Vec<f32>>> = {
            let mut g = Graph::new(params);
            let out = f(&mut g)?;
            let grads = g.backward(out, None)?;
            g.param_grads(&grads)
                .into_iter()
                .map(|o| o.map(|s| s.to_vec()))
                .collect()
        };
        let eval = |params: &[Parameter]| -> Result<(f64, Vec<bool>), NnError> {
            let mut g = Graph::new(params);
            let out = f(&mut g)?;
            Ok((g.scalar(out), g.relu_pattern()))
        };
        let base_pattern = eval(params)?.1;
        let mut skipped = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut errors = Vec::new();
        let (mut all_analytic, mut all_numeric) = (Vec::new(), Vec::new());
        let mut failure = None;
        for pi in 0..params.len() {
            let n = params[pi].tensor.numel();
            let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
            let picks = sample(&mut rng, n, k).into_vec();
            let full = analytic_all[pi].clone().unwrap_or_else(|| vec![0.0; n]);
            let mut analytic = Vec::with_capacity(k);
            let mut numeric = Vec::with_capacity(k);
            for &j in &picks {
                let a = full[j] * self.analytic_scale;
                if !a.is_finite() {
                    failure.get_or_insert(format!(
                        "{name}: non-finite gradient in {} at {j}",
                        params[pi].name
                    ));
                }
                let orig = params[pi].tensor.data()[j];
                params[pi].tensor.data_mut()[j] = orig + self.step;
                let (plus, pp) = eval(params)?;
                params[pi].tensor.data_mut()[j] = orig - self.step;
                let (minus, pm) = eval(params)?;
                params[pi].tensor.data_mut()[j] = orig;
                if pp != base_pattern || pm != base_pattern {
                    skipped += 1;
                    continue;
                }
                analytic.push(a);
                numeric.push((plus - minus) / (2.0 * self.step as f64));
            }
            errors.push(relative_error(&analytic, &numeric, self.rms_floor));
            all_analytic.extend(analytic);
            all_numeric.extend(numeric);
        }
        let overall = relative_error(&all_analytic, &all_numeric, self.rms_floor);
        // Discarding more than a tenth of the sample would hide too much.
        if skipped * 10 > all_numeric.len() + skipped {
            failure.get_or_insert(format!("{name}: {skipped} entries crossed a ReLU kink"));
        }
        let mut report = GradCheckReport::new(name, overall, errors, self.tolerance, failure);
        report.skipped = skipped;
        Ok(report)
    }

    fn cotangent(&self, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }
}

/// Max relative error per op over `instances` random problems.
pub fn op_suite(
    instances: usize,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<GradCheckReport>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "affine",
        "layer_norm",
        "softmax",
        "multi_head_attention",
        "causal_attention",
        "cross_entropy",
        "relu",
        "dropout",
    ];
    let mut worst: Vec<(f64, Option<String>)> = vec![(0.0, None); names.len()];
    let uniform = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    };
    for inst in 0..instances {
        let check = GradCheck::new(tolerance, seed.wrapping_add(inst as u64));
        let n = rng.random_range(1..5);
        let d_in = rng.random_range(3..7);
        let d_out = rng.random_range(1..5);
        let heads = rng.random_range(1..3);
        let d_model = heads * rng.random_range(1..4);
        let lq = rng.random_range(1..5);
        let lk = rng.random_range(1..5);
        let classes = rng.random_range(2..6);

        let mut reports = Vec::with_capacity(names.len());
        let inputs = [
            uniform(&mut rng, vec![n, d_in]),
            uniform(&mut rng, vec![d_in, d_out]),
            uniform(&mut rng, vec![d_out]),
        ];
        reports.push(check.check_inputs("affine", &inputs, |g, v| g.affine(v[0], v[1], v[2]))?);

        let inputs = [
            uniform(&mut rng, vec![n, d_in + 1]).scaled(2.0),
            uniform(&mut rng, vec![d_in + 1]),
            uniform(&mut rng, vec![d_in + 1]),
        ];
        reports.push(check.check_inputs("layer_norm", &inputs, |g, v| {
            g.layer_norm(v[0], v[1], v[2], super::LAYER_NORM_EPS)
        })?);

        let inputs = [uniform(&mut rng, vec![n, classes])];
        reports.push(check.check_inputs("softmax", &inputs, |g, v| Ok(g.softmax(v[0])))?);

        let mut attn_inputs = vec![
            uniform(&mut rng, vec![lq, d_model]),
            uniform(&mut rng, vec![lk, d_model]),
        ];
        for _ in 0..4 {
            attn_inputs.push(uniform(&mut rng, vec![d_model, d_model]).scaled(0.7));
            attn_inputs.push(uniform(&mut rng, vec![d_model]).scaled(0.1));
        }
        let mha = |mask: Option<Vec<bool>>| {
            move |g: &mut Graph<'_>, v: &[Var]| {
                let w = AttentionWeights {
                    wq: v[2],
                    bq: v[3],
                    wk: v[4],
                    bk: v[5],
                    wv: v[6],
                    bv: v[7],
                    wo: v[8],
                    bo: v[9],
                };
                let kv = if mask.is_some() { v[0] } else { v[1] };
                multi_head_attention(g, v[0], kv, &w, heads, mask.as_deref())
            }
        };
        reports.push(check.check_inputs("multi_head_attention", &attn_inputs, mha(None))?);
        reports.push(check.check_inputs(
            "causal_attention",
            &attn_inputs,
            mha(Some(causal_mask(lq))),
        )?);

        let targets: Vec<Option<usize>> = (0..n)
            .map(|r| {
                if r % 3 == 2 {
                    None
                } else {
                    Some(rng.random_range(0..classes))
                }
            })
            .collect();
        let inputs = [uniform(&mut rng, vec![n, classes]).scaled(2.0)];
        reports.push(check.check_inputs("cross_entropy", &inputs, |g, v| {
            g.cross_entropy(v[0], &targets)
        })?);

        // keep relu inputs away from the kink so the difference quotient is valid
        let inputs = [Tensor::from_fn(vec![n, d_in], |_| {
            let m = rng.random_range(0.05f32..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })];
        reports.push(check.check_inputs("relu", &inputs, |g, v| Ok(g.relu(v[0])))?);

        let inputs = [uniform(&mut rng, vec![n, d_in])];
        let drop_seed = rng.random::<u64>();
        reports.push(check.check_inputs("dropout", &inputs, |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
            Ok(g.dropout(v[0], 0.3, &mut r))
        })?);

        for (slot, rep) in worst.iter_mut().zip(reports) {
            slot.0 = slot.0.max(rep.max_rel_error);
            if slot.1.is_none() {
                slot.1 = rep.failure;
            }
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(name, (err, failure))| {
            GradCheckReport::new(name, err, vec![err], tolerance, failure)
        })
        .collect())
}

fn contract(values: &[f32], cot: &[f32]) -> f64 {
    values
        .iter()
        .zip(cot)
        .map(|(&v, &c)| v as f64 * c as f64)
        .sum()
}

/// RMS gradient entry below which the comparison becomes absolute. A
/// difference quotient over single-precision outputs carries noise of a few
/// 1e-5 per entry, so smaller gradients cannot be resolved to 1e-3 relative.
pub const OUTPUT_NOISE_RMS_FLOOR: f64 = 3e-2;

/// Floor for scalar losses accumulated in `f64`, where the quotient noise is
/// several orders of magnitude lower.
pub const PRECISE_LOSS_RMS_FLOOR: f64 = 1e-5;

/// Norm-wise relative error `|a - n| / max(|a|, |n|, floor * sqrt(len))`.
pub fn relative_error(analytic: &[f32], numeric: &[f64], rms_floor: f64) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a as f64;
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let floor = rms_floor * (analytic.len() as f64).sqrt();
    if analytic.is_empty() {
        return 0.0;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn affine_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [
            random(vec![3, 4], &mut rng),
            random(vec![4, 2], &mut rng),
            random(vec![2], &mut rng),
        ];
        let r = GradCheck::new(1e-3, 7)
            .check_inputs("affine", &inputs, |g, v| g.affine(v[0], v[1], v[2]))
            .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [
            random(vec![3, 4], &mut rng),
            random(vec![4, 2], &mut rng),
            random(vec![2], &mut rng),
        ];
        let mut check = GradCheck::new(1e-3, 7);
        check.analytic_scale = 1.01;
        let r = check
            .check_inputs("affine", &inputs, |g, v| g.affine(v[0], v[1], v[2]))
            .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 5e-3);
    }

    #[test]
    fn every_op_passes_on_random_instances() {
        for r in op_suite(100, 1e-3, 2024).unwrap() {
            assert!(r.passed, "{} max rel error {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn relative_error_floor() {
        let f = OUTPUT_NOISE_RMS_FLOOR;
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0], f), 0.0);
        assert!(relative_error(&[1e-8, 0.0], &[4e-6, -3e-6], f) < 1e-3);
        assert!((relative_error(&[1.01], &[1.0], f) - 0.01 / 1.01).abs() < 1e-6);
    }
}
