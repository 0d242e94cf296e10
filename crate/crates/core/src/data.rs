//! Synthetic Gaussian-mixture domain-shift tasks, their Bayes oracle, and CSV
//! ingestion.
//!
//! A task places `modes_per_class` isotropic Gaussian clusters per class in
//! the source domain. The target domain reuses the source clusters, with an
//! optional permutation of which class occupies which cluster positions,
//! then applies a rotation (in the plane of the first two coordinates), a
//! uniform scale and a translation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    #[serde(default = "unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Shift {
    pub fn identity(dim: usize) -> Self {
        Shift {
            rotation_deg: 0.0,
            translation: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| v * self.scale).collect();
        if out.len() >= 2 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (a, b) = (out[0], out[1]);
            out[0] = c * a - s * b;
            out[1] = s * a + c * b;
        }
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o += t;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub classes: usize,
    #[serde(default = "one_mode")]
    pub modes_per_class: usize,
    /// Cluster centres, class-major: row `e * modes_per_class + m`.
    pub means: Vec<Vec<f64>>,
    /// One isotropic standard deviation per cluster, same order as `means`.
    pub stddevs: Vec<f64>,
    /// Class proportions, shared by both domains. Uniform when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    pub shift: Shift,
    /// Target class `e` occupies the source cluster positions of class
    /// `mode_swap[e]`.
    #[serde(default)]
    pub mode_swap: Option<Vec<usize>>,
    /// Fraction of source labels replaced by a different, random class.
    #[serde(default)]
    pub label_noise: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
}

fn one_mode() -> usize {
    1
}

impl DomainShiftSpec {
    /// Three well-separated classes in the plane with a rotated, translated
    /// target in which classes 0 and 1 trade cluster positions.
    pub fn swap3(seed: u64) -> Self {
        DomainShiftSpec {
            classes: 3,
            modes_per_class: 1,
            means: vec![vec![0.0, 3.0], vec![-2.6, -1.5], vec![2.6, -1.5]],
            stddevs: vec![0.8; 3],
            class_weights: None,
            shift: Shift {
                rotation_deg: 25.0,
                translation: vec![1.5, 0.5],
                scale: 1.0,
            },
            mode_swap: Some(vec![1, 0, 2]),
            label_noise: 0.0,
            n_source: 600,
            n_target: 600,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    fn clusters(&self) -> usize {
        self.classes * self.modes_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.classes == 0 {
            return bad("class count must be >= 1".into());
        }
        if self.modes_per_class == 0 {
            return bad("modes_per_class must be >= 1".into());
        }
        if self.means.len() != self.clusters() || self.stddevs.len() != self.clusters() {
            return bad(format!(
                "expected {} cluster means and stddevs, got {} and {}",
                self.clusters(),
                self.means.len(),
                self.stddevs.len()
            ));
        }
        let dim = self.input_dim();
        if dim == 0 || self.means.iter().any(|m| m.len() != dim) {
            return bad("cluster means must share one non-zero dimension".into());
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return bad("cluster means must be finite".into());
        }
        if self.stddevs.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("stddevs must be positive".into());
        }
        if self.shift.translation.len() != dim {
            return bad(format!("translation must have {dim} entries"));
        }
        if !(self.shift.scale > 0.0 && self.shift.scale.is_finite()) {
            return bad("shift scale must be positive".into());
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes || w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad("class_weights needs one positive entry per class".into());
            }
        }
        if let Some(perm) = &self.mode_swap {
            let mut seen = vec![false; self.classes];
            if perm.len() != self.classes {
                return bad("mode_swap must list every class once".into());
            }
            for &e in perm {
                if e >= self.classes || seen[e] {
                    return bad(format!("mode_swap {perm:?} is not a permutation"));
                }
                seen[e] = true;
            }
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1)".into());
        }
        if self.label_noise > 0.0 && self.classes < 2 {
            return bad("label noise needs at least two classes".into());
        }
        if self.n_source == 0 || self.n_target == 0 {
            return bad("sample counts must be >= 1".into());
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        let raw = self
            .class_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.classes]);
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    fn position_class(&self, class: usize, domain: Domain) -> usize {
        match (domain, &self.mode_swap) {
            (Domain::Target, Some(perm)) => perm[class],
            _ => class,
        }
    }

    /// Mean and stddev of cluster `(class, mode)` in the given domain.
    pub fn cluster(&self, class: usize, mode: usize, domain: Domain) -> (Vec<f64>, f64) {
        let own = class * self.modes_per_class + mode;
        let placed = self.position_class(class, domain) * self.modes_per_class + mode;
        match domain {
            Domain::Source => (self.means[own].clone(), self.stddevs[own]),
            Domain::Target => (
                self.shift.apply(&self.means[placed]),
                self.stddevs[own] * self.shift.scale,
            ),
        }
    }
}

/// Feature matrix plus labels. Target labels exist only for evaluation:
/// [`Dataset::train_labels`] refuses to hand them out.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<Option<usize>>,
    domain: Domain,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<Option<usize>>, domain: Domain) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: features.shape(),
                rhs: (labels.len(), 1),
            });
        }
        Ok(Dataset {
            features,
            labels,
            domain,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Labels for supervised training; source domain only.
    pub fn train_labels(&self) -> Result<Vec<usize>> {
        if self.domain != Domain::Source {
            return Err(Error::Contract(
                "target labels are not available to the training path".into(),
            ));
        }
        self.all_labels()
    }

    /// Labels for evaluation, in either domain.
    pub fn eval_labels(&self) -> Result<Vec<usize>> {
        self.all_labels()
    }

    fn all_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Data(format!("row {i} is unlabeled"))))
            .collect()
    }

    pub fn raw_labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Largest label + 1, or 0 if unlabeled.
    pub fn label_span(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |&m| m + 1)
    }
}

/// Samples both domains. Pure in `spec` (including its seed).
pub fn generate(spec: &DomainShiftSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let source = sample_domain(spec, Domain::Source, spec.n_source, 1)?;
    let target = sample_domain(spec, Domain::Target, spec.n_target, 2)?;
    Ok((source, target))
}

fn balanced_labels(weights: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * n as f64).floor() as usize).collect();
    let mut short = n - counts.iter().sum::<usize>();
    let mut e = 0;
    let c = counts.len();
    while short > 0 {
        counts[e % c] += 1;
        short -= 1;
        e += 1;
    }
    counts
        .iter()
        .enumerate()
        .flat_map(|(e, &k)| std::iter::repeat_n(e, k))
        .collect()
}

fn sample_domain(spec: &DomainShiftSpec, domain: Domain, n: usize, stream: u64) -> Result<Dataset> {
    let mut rng = substream(spec.seed, stream);
    let mut labels = balanced_labels(&spec.weights(), n);
    labels.shuffle(&mut rng);

    let dim = spec.input_dim();
    let mut data = Vec::with_capacity(n * dim);
    for &y in &labels {
        let mode = if spec.modes_per_class > 1 {
            rng.random_range(0..spec.modes_per_class)
        } else {
            0
        };
        let (mean, sd) = spec.cluster(y, mode, domain);
        for m in mean {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + sd * z);
        }
    }

    if domain == Domain::Source && spec.label_noise > 0.0 {
        let flips = (spec.label_noise * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..flips] {
            let offset = rng.random_range(1..spec.classes);
            labels[i] = (labels[i] + offset) % spec.classes;
        }
    }

    Dataset::new(
        Matrix::from_vec(n, dim, data)?,
        labels.into_iter().map(Some).collect(),
        domain,
    )
}

/// Maximum-posterior class under the true generative model of `domain`;
/// ties go to the lowest class index.
pub fn bayes_oracle(spec: &DomainShiftSpec, x: &[f64], domain: Domain) -> usize {
    let weights = spec.weights();
    let mut best = (f64::NEG_INFINITY, 0);
    for e in 0..spec.classes {
        let comps: Vec<f64> = (0..spec.modes_per_class)
            .map(|m| {
                let (mean, sd) = spec.cluster(e, m, domain);
                let sq: f64 = x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                -sq / (2.0 * sd * sd) - x.len() as f64 * sd.ln()
            })
            .collect();
        let top = comps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + comps.iter().map(|c| (c - top).exp()).sum::<f64>().ln();
        let score = weights[e].ln() + lse - (spec.modes_per_class as f64).ln();
        if score > best.0 {
            best = (score, e);
        }
    }
    best.1
}

/// Bayes-oracle accuracy on a labeled dataset.
pub fn oracle_accuracy(spec: &DomainShiftSpec, data: &Dataset) -> Result<f64> {
    let labels = data.eval_labels()?;
    if labels.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| bayes_oracle(spec, data.features().row(*i), data.domain()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Writes `x0,..,x{n-1},label` with `-1` for unlabeled rows.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..data.input_dim() {
        let _ = write!(out, "x{j},");
    }
    out.push_str("label\n");
    for (i, label) in data.labels.iter().enumerate() {
        for v in data.features.row(i) {
            let _ = write!(out, "{v:?},");
        }
        match label {
            Some(y) => {
                let _ = writeln!(out, "{y}");
            }
            None => out.push_str("-1\n"),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: &Path, domain: Domain) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, domain)
}

pub fn parse_csv(text: &str, domain: Domain) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        });
    };
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names.iter().any(|n| n.parse::<f64>().is_ok()) || names.last() != Some(&"label") {
        return Err(Error::Parse {
            line: 1,
            msg: "missing header (expected feature names followed by `label`)".into(),
        });
    }
    let dim = names.len() - 1;
    if dim == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no feature columns".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != dim + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} columns, found {}", dim + 1, cells.len()),
            });
        }
        for c in &cells[..dim] {
            let v: f64 = c.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("non-numeric cell `{c}`"),
            })?;
            data.push(v);
        }
        let label: i64 = cells[dim].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("label `{}` is not an integer", cells[dim]),
        })?;
        labels.push(match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("negative label {l}"),
                })
            }
        });
    }
    let n = labels.len();
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, domain)
}
