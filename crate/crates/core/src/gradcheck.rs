//! Central finite-difference gradient checks.
//!
//! The checker rebuilds the computation from scratch for every perturbed
//! element, so it shares nothing with the reverse pass beyond the forward
//! operations themselves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::cam::{adversary_loss, cam_forward, random_matrix, AdversaryNet, CamParams};
use crate::error::{Error, Result};
use crate::losses::{activation_decay, binomial_deviance, ntri_regularizer, LossConfig, PairBatch};
use crate::model::{BackboneConfig, Bound, ConvStage, Model, ModelConfig};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for single operations and losses.
pub const GRAD_TOL: f64 = 1e-4;
/// Relative tolerance for the end-to-end model check.
pub const END_TO_END_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale, which makes
/// the effective absolute floor `GRAD_TOL * MAGNITUDE_FLOOR = 1e-7`.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_strided(inputs, 1, f)
}

/// Like [`check_gradients`] but only perturbs every `stride`-th element.
pub fn check_gradients_strided<F>(inputs: &[Tensor], stride: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::dim("gradcheck", "function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zero(v, t.numel()))
        .collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in (0..input.numel()).step_by(stride.max(1)) {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + FD_STEP;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - FD_STEP;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ti][ei];
            let rel = relative_error(a, numeric);
            if !rel.is_finite() {
                return Err(Error::Parameter(format!("non-finite gradient at input {ti} element {ei}")));
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ei);
            }
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// One line of [`suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Random values bounded away from zero, so ReLU kinks stay out of reach
/// of the finite-difference step.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    t
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.leaf(random(g.shape(y), &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// The micro-model of the end-to-end check: one scale, two branches, 8×8
/// inputs, `d = 8`.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        scales: 1,
        branches: 2,
        dim: 8,
        share_fnet_across_scales: true,
        use_cam: true,
        backbone: BackboneConfig {
            input_channels: 1,
            input_size: 8,
            fnet: vec![ConvStage::new(4, 1), ConvStage::new(6, 2)],
            gnet: vec![ConvStage::new(6, 1), ConvStage::new(8, 2)],
        },
    }
}

/// Gradient of the binomial deviance of the micro-model on four glyph-like
/// images, with respect to every parameter.
pub fn end_to_end_check(seed: u64) -> Result<GradCheckReport> {
    let model = Model::new(micro_model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = random(&[4, 1, 8, 8], &mut rng);
    let pairs = PairBatch::new(&[0, 0, 1, 1])?;
    let cfg = LossConfig::default();
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    check_gradients(&inputs, |g, vars| {
        let bound = Bound { vars: vars.to_vec() };
        let x = g.leaf(images.clone());
        let out = model.forward_scale(g, &bound, 0, x)?;
        binomial_deviance(g, &out.embeddings, &pairs, &cfg)
    })
}

/// Central-difference checks of every differentiable operation, each loss
/// and the end-to-end micro-model. Deterministic in `seed`.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, tolerance, report| out.push(SuiteEntry { name, tolerance, report });

    let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
    push("matmul", GRAD_TOL, check_gradients(&[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 1)
    })?);
    push("transpose", GRAD_TOL, check_gradients(&[a.clone()], |g, v| {
        let y = g.transpose(v[0])?;
        project(g, y, 2)
    })?);
    let c = random(&[3, 4], &mut rng);
    push("add", GRAD_TOL, check_gradients(&[a.clone(), c.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 3)
    })?);
    push("sub", GRAD_TOL, check_gradients(&[a.clone(), c.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 4)
    })?);
    push("mul", GRAD_TOL, check_gradients(&[a.clone(), c.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 5)
    })?);
    push("scale", GRAD_TOL, check_gradients(&[a.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y, 6)
    })?);
    let k = off_kink(&[3, 4], &mut rng);
    push("relu", GRAD_TOL, check_gradients(&[k], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 7)
    })?);
    let wide = random(&[3, 4], &mut rng);
    let wide = Tensor::new(&[3, 4], wide.data().iter().map(|v| 4.0 * v).collect())?;
    push("sigmoid", GRAD_TOL, check_gradients(&[wide.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 8)
    })?);
    push("softplus", GRAD_TOL, check_gradients(&[wide], |g, v| {
        let y = g.softplus(v[0]);
        project(g, y, 9)
    })?);
    push("sum", GRAD_TOL, check_gradients(&[a.clone()], |g, v| {
        let s = g.sum(v[0]);
        let sq = g.mul(s, s)?;
        Ok(g.sum(sq))
    })?);
    push("sum_squares", GRAD_TOL, check_gradients(&[a.clone()], |g, v| g.sum_squares(v[0]))?);
    push("reshape", GRAD_TOL, check_gradients(&[a.clone()], |g, v| {
        let y = g.reshape(v[0], &[2, 6])?;
        project(g, y, 10)
    })?);
    push("grad_reverse", GRAD_TOL, check_gradients(&[a.clone()], |g, v| {
        // Reversal twice is the identity in both directions.
        let y = g.grad_reverse(v[0]);
        let y = g.grad_reverse(y);
        project(g, y, 11)
    })?);
    let (x, w) = (random(&[2, 3, 5, 5], &mut rng), random(&[4, 3, 3, 3], &mut rng));
    push("conv2d_stride1", GRAD_TOL, check_gradients(&[x.clone(), w.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 1)?;
        project(g, y, 12)
    })?);
    push("conv2d_stride2", GRAD_TOL, check_gradients(&[x.clone(), w], |g, v| {
        let y = g.conv2d(v[0], v[1], 2)?;
        project(g, y, 13)
    })?);
    push("spatial_avg_pool", GRAD_TOL, check_gradients(&[x.clone()], |g, v| {
        let y = g.spatial_avg_pool(v[0])?;
        project(g, y, 14)
    })?);
    let gate = random(&[2, 3], &mut rng);
    push("channel_scale", GRAD_TOL, check_gradients(&[x, gate], |g, v| {
        let y = g.channel_scale(v[0], v[1])?;
        project(g, y, 15)
    })?);
    let d = random(&[3, 2], &mut rng);
    push("concat", GRAD_TOL, check_gradients(&[a.clone(), d], |g, v| {
        let y = g.concat(&[v[0], v[1]])?;
        project(g, y, 16)
    })?);
    push("slice_last", GRAD_TOL, check_gradients(&[a.clone()], |g, v| {
        let y = g.slice_last(v[0], 1, 2)?;
        project(g, y, 17)
    })?);
    push("normalize_rows", GRAD_TOL, check_gradients(&[a], |g, v| {
        let y = g.normalize_rows(v[0])?;
        project(g, y, 18)
    })?);

    let u = random(&[2, 3, 4, 4], &mut rng);
    let cam = CamParams::random(3, 5, &mut rng);
    push("cam", GRAD_TOL, check_gradients(&[u, cam.w1, cam.w2], |g, v| {
        let out = cam_forward(g, v[0], v[1], v[2])?;
        project(g, out.output, 19)
    })?);
    let net = AdversaryNet::random(4, 6, &mut rng);
    let es: Vec<Tensor> = (0..3).map(|_| random_matrix(2, 4, 1.0, &mut rng)).collect();
    push("adversary_loss", GRAD_TOL, check_gradients(
        &[es[0].clone(), es[1].clone(), es[2].clone(), net.l1, net.l2],
        |g, v| adversary_loss(g, &v[..3], v[3], v[4], 1.0, false),
    )?);

    let (e1, e2) = (random(&[6, 3], &mut rng), random(&[6, 3], &mut rng));
    let pairs = PairBatch::new(&[0, 0, 1, 1, 2, 2])?;
    let cfg = LossConfig::default();
    push("binomial_deviance", GRAD_TOL, check_gradients(&[e1.clone(), e2.clone()], |g, v| {
        binomial_deviance(g, v, &pairs, &cfg)
    })?);
    push("activation_decay", GRAD_TOL, check_gradients(&[e1, e2], |g, v| activation_decay(g, v, &cfg))?);
    let (w1, w2) = (random(&[2, 5], &mut rng), random(&[2, 5], &mut rng));
    push("ntri", GRAD_TOL, check_gradients(&[w1, w2], |g, v| ntri_regularizer(g, v, &cfg))?);

    push("end_to_end", END_TO_END_TOL, end_to_end_check(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for e in suite(0).unwrap() {
            assert!(e.passes(), "{}: {:?}", e.name, e.report);
        }
    }

    #[test]
    fn relative_error_uses_magnitude_floor() {
        assert_eq!(relative_error(2.0, 2.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
        // Tiny gradients are judged on an absolute scale.
        assert!((relative_error(1e-9, 2e-9) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x * x) with x used as a constant on one side: the graph gradient
        // is then x, not 2x, so the check must fail.
        let x = Tensor::vector(&[1.0, -2.0, 0.5]);
        let report = check_gradients(&[x], |g, v| {
            let c = g.leaf(g.value(v[0]).clone());
            let p = g.mul(v[0], c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err > 0.4);
    }
}
