//! Discriminator input construction for each conditioning strategy.
//!
//! | strategy      | discriminator input            | width  |
//! |---------------|--------------------------------|--------|
//! | `dann`        | `f`                            | `d`    |
//! | `concat_fp`   | `f ⊕ p`                        | `d+c`  |
//! | `sdan`        | `f ⊕ k·p̂`                      | `d+c`  |
//! | `ssdan`       | `f ⊕ k·p̂·M`                    | `2d`   |
//! | `multilinear` | `vec(f ⊗ p)`                   | `d·c`  |
//!
//! `p̂` rescales each prediction row to the Euclidean norm of its feature
//! row, and `M` holds one source class prototype per row. The prediction
//! branch is always detached before it reaches the discriminator, so the
//! classifier never receives adversarial gradient.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;

/// Guard on the prediction norm in the normalization denominator.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    Dann,
    ConcatFp,
    Sdan,
    Ssdan,
    Multilinear,
}

impl ConditioningKind {
    pub fn name(self) -> &'static str {
        match self {
            ConditioningKind::Dann => "dann",
            ConditioningKind::ConcatFp => "concat_fp",
            ConditioningKind::Sdan => "sdan",
            ConditioningKind::Ssdan => "ssdan",
            ConditioningKind::Multilinear => "multilinear",
        }
    }

    pub fn uses_predictions(self) -> bool {
        self != ConditioningKind::Dann
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningStrategy {
    pub kind: ConditioningKind,
    /// Norm control factor; only `sdan` and `ssdan` read it.
    #[serde(default = "one")]
    pub k: f64,
    /// Reweight adversarial terms by `1 + exp(-H(p))`.
    #[serde(default)]
    pub entropy_weighting: bool,
    /// Rescale the projected branch of `ssdan` back to `k·‖f‖` per row.
    #[serde(default)]
    pub renormalize_projection: bool,
}

fn one() -> f64 {
    1.0
}

impl ConditioningStrategy {
    fn of(kind: ConditioningKind, k: f64) -> Self {
        ConditioningStrategy {
            kind,
            k,
            entropy_weighting: false,
            renormalize_projection: false,
        }
    }

    pub fn dann() -> Self {
        Self::of(ConditioningKind::Dann, 1.0)
    }

    pub fn concat_fp() -> Self {
        Self::of(ConditioningKind::ConcatFp, 1.0)
    }

    pub fn sdan(k: f64) -> Self {
        Self::of(ConditioningKind::Sdan, k)
    }

    pub fn ssdan(k: f64) -> Self {
        Self::of(ConditioningKind::Ssdan, k)
    }

    pub fn multilinear() -> Self {
        Self::of(ConditioningKind::Multilinear, 1.0)
    }

    pub fn with_entropy(mut self) -> Self {
        self.entropy_weighting = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!(
                "norm control factor k must be positive and finite, got {}",
                self.k
            )));
        }
        if self.kind == ConditioningKind::ConcatFp && self.k != 1.0 {
            return Err(Error::Config("concat_fp uses k = 1".into()));
        }
        Ok(())
    }

    /// The factor actually applied to the prediction branch.
    pub fn effective_k(&self) -> f64 {
        match self.kind {
            ConditioningKind::Sdan | ConditioningKind::Ssdan => self.k,
            _ => 1.0,
        }
    }

    /// Discriminator input width for feature size `d` and `c` classes.
    pub fn input_width(&self, d: usize, c: usize) -> usize {
        match self.kind {
            ConditioningKind::Dann => d,
            ConditioningKind::ConcatFp | ConditioningKind::Sdan => d + c,
            ConditioningKind::Ssdan => 2 * d,
            ConditioningKind::Multilinear => d * c,
        }
    }

    /// Short label such as `sdan+e(k=3)`.
    pub fn label(&self) -> String {
        let mut s = self.kind.name().to_string();
        if self.entropy_weighting {
            s.push_str("+e");
        }
        if matches!(self.kind, ConditioningKind::Sdan | ConditioningKind::Ssdan) {
            s.push_str(&format!("(k={})", self.k));
        }
        s
    }
}

/// `p̂_i = (‖f_i‖ / max(‖p_i‖, ε)) · p_i`, differentiable in both inputs.
pub fn normalize_predictions(g: &mut Graph, f: Tensor, p: Tensor) -> Result<Tensor> {
    if f.rows() != p.rows() {
        return Err(Error::Shape {
            op: "normalize_predictions",
            lhs: f.shape(),
            rhs: p.shape(),
        });
    }
    let f_norm = g.row_l2_norm(f);
    let p_norm = g.row_l2_norm(p);
    let guarded = g.clamp_min(p_norm, NORM_EPS);
    let inv = g.recip(guarded)?;
    let ratio = g.mul(f_norm, inv)?;
    g.row_scale(p, ratio)
}

/// Semantic-structure matrix: one source class prototype per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    protos: Matrix,
    lambda_ema: f64,
    initialized: Vec<bool>,
}

impl PrototypeBank {
    /// Empty bank; each row is set on the first batch that contains its class.
    pub fn new(classes: usize, dim: usize, lambda_ema: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_ema) {
            return Err(Error::Config(format!(
                "lambda_ema must lie in [0, 1], got {lambda_ema}"
            )));
        }
        Ok(PrototypeBank {
            protos: Matrix::zeros(classes, dim),
            lambda_ema,
            initialized: vec![false; classes],
        })
    }

    /// Bank with standard-normal rows, all marked initialized.
    pub fn random(classes: usize, dim: usize, lambda_ema: f64, seed: u64) -> Result<Self> {
        let mut bank = Self::new(classes, dim, lambda_ema)?;
        let mut rng = seeded(seed);
        for v in bank.protos.as_mut_slice() {
            *v = StandardNormal.sample(&mut rng);
        }
        bank.initialized.fill(true);
        Ok(bank)
    }

    pub(crate) fn from_parts(protos: Matrix, lambda_ema: f64, initialized: Vec<bool>) -> Self {
        PrototypeBank {
            protos,
            lambda_ema,
            initialized,
        }
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.protos
    }

    pub fn lambda_ema(&self) -> f64 {
        self.lambda_ema
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn classes(&self) -> usize {
        self.protos.rows()
    }

    pub fn is_complete(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    /// `M[e] <- λ M[e] + (1-λ) M_batch[e]` for every class present in the batch.
    /// A class seen for the first time takes its batch mean directly.
    pub fn ema_update(&mut self, batch: &Matrix, present: &[bool]) -> Result<()> {
        if batch.shape() != self.protos.shape() || present.len() != self.classes() {
            return Err(Error::Shape {
                op: "ema_update",
                lhs: self.protos.shape(),
                rhs: batch.shape(),
            });
        }
        let lam = self.lambda_ema;
        for e in 0..self.classes() {
            if !present[e] {
                continue;
            }
            if self.initialized[e] {
                for (m, &b) in self.protos.row_mut(e).iter_mut().zip(batch.row(e)) {
                    *m = lam * *m + (1.0 - lam) * b;
                }
            } else {
                self.protos.row_mut(e).copy_from_slice(batch.row(e));
                self.initialized[e] = true;
            }
        }
        Ok(())
    }
}

/// Per-class mean of source features; absent classes keep a zero row and a
/// `false` presence flag.
pub fn batch_prototypes(feats: &Matrix, labels: &[usize], classes: usize) -> Result<(Matrix, Vec<bool>)> {
    if labels.len() != feats.rows() {
        return Err(Error::Shape {
            op: "batch_prototypes",
            lhs: feats.shape(),
            rhs: (labels.len(), 1),
        });
    }
    let mut sums = Matrix::zeros(classes, feats.cols());
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!(
                "label {y} at index {i} out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
        for (s, &v) in sums.row_mut(y).iter_mut().zip(feats.row(i)) {
            *s += v;
        }
    }
    for (e, &n) in counts.iter().enumerate() {
        if n > 0 {
            for s in sums.row_mut(e) {
                *s /= n as f64;
            }
        }
    }
    Ok((sums, counts.iter().map(|&n| n > 0).collect()))
}

/// `p̂ · M`: each row becomes a prototype-weighted point in feature space.
/// The bank enters as a constant.
pub fn project_structure(g: &mut Graph, p_hat: Tensor, bank: &PrototypeBank) -> Result<Tensor> {
    if p_hat.cols() != bank.classes() {
        return Err(Error::Shape {
            op: "project_structure",
            lhs: p_hat.shape(),
            rhs: bank.protos.shape(),
        });
    }
    let m = g.constant(bank.protos.clone());
    g.matmul(p_hat, m)
}

/// Discriminator input plus the (detached) prediction branch, if any.
#[derive(Clone, Copy, Debug)]
pub struct Conditioned {
    pub input: Tensor,
    pub branch: Option<Tensor>,
    /// `ssdan` ran with some prototypes still unset (treated as zero rows).
    pub fell_back: bool,
}

pub fn condition_input(
    g: &mut Graph,
    strategy: &ConditioningStrategy,
    f: Tensor,
    p: Tensor,
    bank: Option<&PrototypeBank>,
) -> Result<Conditioned> {
    if f.rows() != p.rows() {
        return Err(Error::Shape {
            op: "condition_input",
            lhs: f.shape(),
            rhs: p.shape(),
        });
    }
    let plain = |input, branch| Conditioned {
        input,
        branch,
        fell_back: false,
    };
    match strategy.kind {
        ConditioningKind::Dann => Ok(plain(f, None)),
        ConditioningKind::ConcatFp => {
            let branch = g.detach(p);
            Ok(plain(g.concat_cols(f, branch)?, Some(branch)))
        }
        ConditioningKind::Sdan => {
            let branch = scaled_normalized(g, strategy.k, f, p)?;
            Ok(plain(g.concat_cols(f, branch)?, Some(branch)))
        }
        ConditioningKind::Ssdan => {
            let bank = bank.ok_or_else(|| Error::Contract("ssdan needs a prototype bank".into()))?;
            let fell_back = !bank.is_complete();
            if fell_back {
                log::warn!("prototype bank incomplete; missing prototypes contribute zero this batch");
            }
            let p_hat = normalize_predictions(g, f, p)?;
            let projected = project_structure(g, p_hat, bank)?;
            let scaled = if strategy.renormalize_projection {
                let renormed = normalize_predictions(g, f, projected)?;
                g.scale(renormed, strategy.k)
            } else {
                g.scale(projected, strategy.k)
            };
            let branch = g.detach(scaled);
            Ok(Conditioned {
                input: g.concat_cols(f, branch)?,
                branch: Some(branch),
                fell_back,
            })
        }
        ConditioningKind::Multilinear => {
            let branch = g.detach(p);
            Ok(plain(g.row_outer(f, branch)?, Some(branch)))
        }
    }
}

fn scaled_normalized(g: &mut Graph, k: f64, f: Tensor, p: Tensor) -> Result<Tensor> {
    let p_hat = normalize_predictions(g, f, p)?;
    let scaled = g.scale(p_hat, k);
    Ok(g.detach(scaled))
}

/// `1 + exp(-H(p_i))` per row, with `0 log 0 = 0`.
pub fn entropy_weight(p: &Matrix) -> Matrix {
    let w = row_entropy(p).into_iter().map(|h| 1.0 + (-h).exp()).collect();
    Matrix::from_vec(p.rows(), 1, w).expect("one weight per row")
}

/// Shannon entropy (nats) of each row.
pub fn row_entropy(p: &Matrix) -> Vec<f64> {
    (0..p.rows())
        .map(|r| {
            -p.row(r)
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.ln())
                .sum::<f64>()
        })
        .collect()
}
