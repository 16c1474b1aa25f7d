//! Central finite-difference check of every parameter gradient.
//!
//! Convolution and attention parameters are perturbed and the whole network
//! is re-run. The classifier head is checked with a hand-written evaluator:
//! a highway or dense weight in column `j` only moves output unit `j`, so
//! the perturbed loss is recomputed from that unit alone. This keeps the
//! roughly 300k head scalars tractable while still differencing the exact
//! loss function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{logits_cross_entropy_value, Tape};
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that two near-zero
/// gradients are not compared purely by their rounding noise.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ParamCheck {
    /// Layer a parameter belongs to, e.g. `block0.attn` or `highway`.
    pub fn layer(&self) -> &str {
        let parts: Vec<&str> = self.name.split('.').collect();
        let n = if parts[0].starts_with("block") { 2 } else { 1 };
        let end: usize = parts[..n].iter().map(|p| p.len()).sum::<usize>() + n - 1;
        &self.name[..end]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Passing requires every error to be strictly below the tolerance.
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn violations(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_error < self.tolerance)).collect()
    }

    /// Worst parameter of each layer, in network order.
    pub fn worst_per_layer(&self) -> Vec<(&str, &ParamCheck)> {
        let mut out: Vec<(&str, &ParamCheck)> = Vec::new();
        for p in &self.params {
            match out.iter_mut().find(|(l, _)| *l == p.layer()) {
                Some(entry) if p.max_rel_error > entry.1.max_rel_error => entry.1 = p,
                Some(_) => {}
                None => out.push((p.layer(), p)),
            }
        }
        out
    }
}


/// Analytic gradients of the unweighted loss, inference mode.
fn analytic(model: &Model, x: &Tensor, label: u8) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let p = model.params.register(&mut tape);
    let xv = tape.leaf_ref(x);
    model.check_input(x)?;
    let f = model.features(&mut tape, xv, &p, false, &mut rng)?;
    let features = tape.value(f).clone();
    let logits = model.head(&mut tape, f, &p)?;
    let loss = tape.softmax_cross_entropy(logits, &[label as usize], [1.0, 1.0])?;
    let loss_value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let g = p.iter().into_iter().map(|&v| grads.take(v)).collect();
    Ok((loss_value, features, g))
}

fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn logits_loss(logits: [f64; 2], label: u8) -> f64 {
    let m = logits[0].max(logits[1]);
    m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln() - logits[label as usize]
}

/// Plain-loop evaluation of highway + dense + softmax on a feature row.
struct HeadEval<'a> {
    x: &'a [f64],
    zh: Vec<f64>,
    zt: Vec<f64>,
    y: Vec<f64>,
    w_d: &'a Tensor,
    logits: [f64; 2],
    label: u8,
}

impl<'a> HeadEval<'a> {
    fn new(params: &'a ModelParams, x: &'a [f64], label: u8) -> Self {
        let f = x.len();
        let affine = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..f)
                .map(|j| b.data()[j] + (0..f).map(|i| x[i] * w.data()[i * f + j]).sum::<f64>())
                .collect()
        };
        let (zh, zt) = match &params.highway {
            Some(hw) => (affine(&hw.w_h, &hw.b_h), affine(&hw.w_t, &hw.b_t)),
            None => (Vec::new(), Vec::new()),
        };
        let mut ev = HeadEval {
            x,
            zh,
            zt,
            y: Vec::new(),
            w_d: &params.dense.w,
            logits: [0.0; 2],
            label,
        };
        ev.y = (0..f).map(|j| ev.unit(j, 0.0, 0.0)).collect();
        let w = params.dense.w.data();
        for c in 0..2 {
            ev.logits[c] = params.dense.b.data()[c] + (0..f).map(|j| ev.y[j] * w[j * 2 + c]).sum::<f64>();
        }
        ev
    }

    /// Output unit `j` with its pre-activations shifted by `dh` and `dt`.
    fn unit(&self, j: usize, dh: f64, dt: f64) -> f64 {
        if self.zh.is_empty() {
            return self.x[j];
        }
        let t = stable_sigmoid(self.zt[j] + dt);
        self.x[j] + t * ((self.zh[j] + dh).tanh() - self.x[j])
    }

    fn loss(&self) -> f64 {
        logits_loss(self.logits, self.label)
    }

    fn loss_with_unit(&self, j: usize, dh: f64, dt: f64) -> f64 {
        let dy = self.unit(j, dh, dt) - self.y[j];
        let w = self.w_d.data();
        logits_loss([self.logits[0] + dy * w[j * 2], self.logits[1] + dy * w[j * 2 + 1]], self.label)
    }

    fn loss_with_logits(&self, c: usize, d: f64) -> f64 {
        let mut l = self.logits;
        l[c] += d;
        logits_loss(l, self.label)
    }

    /// Central difference for scalar `idx` of the named head tensor.
    fn numeric(&self, name: &str, idx: usize, eps: f64) -> f64 {
        let f = self.x.len();
        let central = |g: &dyn Fn(f64) -> f64| (g(eps) - g(-eps)) / (2.0 * eps);
        match name {
            "highway.w_h" => {
                let (i, j) = (idx / f, idx % f);
                central(&|e| self.loss_with_unit(j, e * self.x[i], 0.0))
            }
            "highway.b_h" => central(&|e| self.loss_with_unit(idx, e, 0.0)),
            "highway.w_t" => {
                let (i, j) = (idx / f, idx % f);
                central(&|e| self.loss_with_unit(j, 0.0, e * self.x[i]))
            }
            "highway.b_t" => central(&|e| self.loss_with_unit(idx, 0.0, e)),
            "dense.w" => {
                let (j, c) = (idx / 2, idx % 2);
                central(&|e| self.loss_with_logits(c, e * self.y[j]))
            }
            "dense.b" => central(&|e| self.loss_with_logits(idx, e)),
            _ => unreachable!("not a head parameter: {name}"),
        }
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("highway.") || name.starts_with("dense.")
}

/// Checks every parameter gradient of `model` on one sample.
pub fn gradcheck(model: &Model, x: &Tensor, label: u8, eps: f64, tolerance: f64) -> Result<GradcheckReport> {
    gradcheck_with(model, x, label, eps, tolerance, |_, _| {})
}

/// Like [`gradcheck`], but lets `tamper` modify each analytic gradient
/// (by parameter name) before comparison. Used to prove the harness
/// catches a broken backward pass.
pub fn gradcheck_with(
    model: &Model,
    x: &Tensor,
    label: u8,
    eps: f64,
    tolerance: f64,
    mut tamper: impl FnMut(&str, &mut Tensor),
) -> Result<GradcheckReport> {
    if !(eps > 0.0 && eps.is_finite()) || !(tolerance >= 0.0) {
        return Err(Error::Config(format!("need eps > 0 and tolerance >= 0, got {eps} and {tolerance}")));
    }
    if label > 1 {
        return Err(Error::Input(format!("label {label} is not 0 or 1")));
    }
    let (loss, features, mut grads) = analytic(model, x, label)?;
    let names = model.params.names();
    for (name, g) in names.iter().zip(grads.iter_mut()) {
        tamper(name, g);
    }

    let head = HeadEval::new(&model.params, features.data(), label);
    if (head.loss() - loss).abs() > 1e-9 * loss.abs().max(1.0) {
        return Err(Error::Contract(format!(
            "head evaluator disagrees with the network: {} vs {loss}",
            head.loss()
        )));
    }

    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut full_loss = |m: &Model| -> Result<f64> {
        let z = m.logits(x, false, &mut rng)?.reshape([1, 2])?;
        logits_cross_entropy_value(&z, &[label as usize], [1.0, 1.0])
    };

    let mut params = Vec::with_capacity(names.len());
    for (k, (name, g)) in names.iter().zip(&grads).enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            scalars: g.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..g.len() {
            let numeric = if is_head(name) {
                head.numeric(name, idx, eps)
            } else {
                let orig = probe.params.iter()[k].data()[idx];
                probe.params.iter_mut()[k].data_mut()[idx] = orig + eps;
                let plus = full_loss(&probe)?;
                probe.params.iter_mut()[k].data_mut()[idx] = orig - eps;
                let minus = full_loss(&probe)?;
                probe.params.iter_mut()[k].data_mut()[idx] = orig;
                (plus - minus) / (2.0 * eps)
            };
            let a = g.data()[idx];
            let err = relative_error(a, numeric);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradcheckReport {
        eps,
        tolerance,
        loss,
        params,
    })
}
