//! Whole-model finite-difference verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::graph::NormMode;
use crate::model::{model_forward, ForwardCtx, ModelConfig, ParamStore};
use crate::model::init_params;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Initial central-difference half step.
    pub step: f64,
    /// Depth of the Ridders extrapolation tableau; the step is halved per
    /// level. 1 gives a plain central difference. At init the pre-norm
    /// activations are tiny, so the loss curves on a ~1e-3 scale and no
    /// single step is both truncation- and roundoff-safe for every group.
    pub levels: usize,
    /// Coordinates probed per parameter tensor; smaller tensors are probed
    /// exhaustively.
    pub coords_per_group: usize,
    pub batch: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub denominator_floor: f64,
    #[doc(hidden)]
    pub gelu_grad_fault: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            levels: 6,
            coords_per_group: 16,
            batch: 2,
            seed: 0,
            threshold: 1e-4,
            denominator_floor: 1e-6,
            gelu_grad_fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.threshold)
    }

    /// One `name checked max_rel_err` line per parameter group.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let flag = if g.max_rel_err < self.threshold { "ok" } else { "FAIL" };
            out.push_str(&format!("{:<28} {:>5} {:>12.3e} {flag}\n", g.name, g.checked, g.max_rel_err));
        }
        out.push_str(&format!(
            "max relative error {:.3e} (threshold {:.0e}): {}\n",
            self.max_rel_err(),
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Ridders' extrapolation of central differences `d(h)` over steps
/// `h, h/2, h/4, ...`, returning the tableau entry with the smallest error
/// estimate.
pub fn ridders(step: f64, levels: usize, mut d: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    const SHRINK: f64 = 2.0;
    let mut prev = vec![d(step)?];
    let mut best = prev[0];
    let mut best_err = f64::INFINITY;
    let mut h = step;
    for _ in 1..levels.max(1) {
        h /= SHRINK;
        let mut row = vec![d(h)?];
        let mut fac = SHRINK * SHRINK;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let err = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if err <= best_err {
                best_err = err;
                best = next;
            }
            row.push(next);
        }
        prev = row;
    }
    Ok(best)
}

fn train_mode_loss(cfg: &ModelConfig, store: &ParamStore, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut ctx = ForwardCtx::without_grads(store, NormMode::Train);
    let x = ctx.input(images.clone());
    let logits = model_forward(&mut ctx, cfg, x)?;
    let loss = ctx.graph.cross_entropy(logits, labels)?;
    Ok(ctx.graph.value(loss).item())
}

/// Compares backpropagated gradients of the train-mode cross-entropy loss
/// against central differences, for every trainable tensor of a freshly
/// initialised model.
pub fn gradcheck_model(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let store = init_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pixel = Uniform::new(0.0, 1.0).expect("valid range");
    let images = Tensor::from_fn(
        [opts.batch, cfg.in_channels, cfg.input_size, cfg.input_size],
        |_| pixel.sample(&mut rng),
    );
    let labels: Vec<usize> = (0..opts.batch).map(|i| i % cfg.num_classes).collect();

    let mut ctx = ForwardCtx::new(&store, NormMode::Train);
    if let Some(f) = opts.gelu_grad_fault {
        ctx.graph.inject_gelu_grad_fault(f);
    }
    let x = ctx.input(images.clone());
    let logits = model_forward(&mut ctx, cfg, x)?;
    let loss = ctx.graph.cross_entropy(logits, &labels)?;
    ctx.graph.backward(loss)?;
    let analytic = ctx.finish().grads;

    let mut groups = Vec::new();
    let mut probe = store.clone();
    for (name, grad) in &analytic {
        let numel = grad.len();
        let coords: Vec<usize> = if numel <= opts.coords_per_group {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.coords_per_group).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = probe.tensor(name)?.data()[i];
            let central = |h: f64, probe: &mut ParamStore| -> Result<f64> {
                probe.tensor_mut(name)?.data_mut()[i] = orig + h;
                let plus = train_mode_loss(cfg, probe, &images, &labels)?;
                probe.tensor_mut(name)?.data_mut()[i] = orig - h;
                let minus = train_mode_loss(cfg, probe, &images, &labels)?;
                probe.tensor_mut(name)?.data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = ridders(opts.step, opts.levels, |h| central(h, &mut probe))?;
            worst = worst.max(relative_error(grad[i], numeric, opts.denominator_floor));
        }
        groups.push(GroupReport { name: name.clone(), checked: coords.len(), max_rel_err: worst });
    }
    Ok(GradCheckReport { groups, threshold: opts.threshold })
}
