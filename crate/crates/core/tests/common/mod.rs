//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use sdan::autodiff::{Graph, Tensor};
use sdan::conditioning::{batch_prototypes, condition_input, ConditioningKind, ConditioningStrategy, PrototypeBank};
use sdan::losses::{adv_loss, ce_loss};
use sdan::autodiff::check::{analytic_grads, max_rel_error, numerical_grads};
use sdan::data::{generate, Dataset, DomainShiftSpec};
use sdan::losses::LambdaSchedule;
use sdan::nn::{init_network, Head, Mlp, MlpVars};
use sdan::rng::seeded;
use sdan::trainer::{train_iteration, NetworkSpec, TrainConfig, TrainState, Trainer, UpdatePath};
use sdan::{Matrix, Result};
use rand::Rng;

/// A small G, F, D triple plus batches for whole-objective gradient checks.
pub struct Fixture {
    pub strategy: ConditioningStrategy,
    pub g: Mlp,
    pub f: Mlp,
    pub d: Mlp,
    pub xs: Matrix,
    pub ys: Vec<usize>,
    pub xt: Matrix,
    pub bank: Option<PrototypeBank>,
}

pub const B: usize = 4;
pub const D: usize = 8;
pub const C: usize = 3;
pub const IN: usize = 5;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Finite differences across a ReLU kink are meaningless; fixtures keep
/// every hidden pre-activation at least this far from zero.
pub const KINK_MARGIN: f64 = 1e-3;

fn min_abs_preactivation(net: &Mlp, x: &Matrix) -> f64 {
    let mut h = x.clone();
    let mut least = f64::INFINITY;
    let layers = net.layers();
    for l in &layers[..layers.len() - 1] {
        let mut z = h.matmul(&l.weight).unwrap();
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(l.bias.as_slice()) {
                *v += b;
                least = least.min(v.abs());
            }
        }
        h = z.map(|v| v.max(0.0));
    }
    least
}

impl Fixture {
    /// The `n`-th fixture whose ReLUs all stay clear of their kinks.
    pub fn smooth(strategy: ConditioningStrategy, n: u64) -> Self {
        (n * 1000..)
            .map(|seed| Fixture::new(strategy.clone(), seed))
            .find(|fx| fx.kink_distance() >= KINK_MARGIN)
            .unwrap()
    }

    fn kink_distance(&self) -> f64 {
        let mut least = f64::INFINITY;
        for x in [&self.xs, &self.xt] {
            least = least.min(min_abs_preactivation(&self.g, x));
            let mut g = Graph::new();
            let f = g.constant(self.g.predict(x).unwrap());
            let p = g.constant(self.f.predict(g.value(f)).unwrap());
            let c = condition_input(&mut g, &self.strategy, f, p, self.bank.as_ref()).unwrap();
            least = least.min(min_abs_preactivation(&self.d, g.value(c.input)));
        }
        least
    }

    pub fn new(strategy: ConditioningStrategy, seed: u64) -> Self {
        let width = strategy.input_width(D, C);
        let g = init_network(&[IN, D, D], Head::None, seed * 7 + 1).unwrap();
        let f = init_network(&[D, C], Head::Softmax, seed * 7 + 2).unwrap();
        let d = init_network(&[width, 4 * width, 1], Head::Sigmoid, seed * 7 + 3).unwrap();
        let mut rng = seeded(seed * 7 + 4);
        let ys = (0..B).map(|_| rng.random_range(0..C)).collect();
        let bank = (strategy.kind == ConditioningKind::Ssdan)
            .then(|| PrototypeBank::random(C, D, 0.5, seed * 7 + 5).unwrap());
        Fixture {
            strategy,
            g,
            f,
            d,
            xs: random_matrix(B, IN, seed * 7 + 6),
            ys,
            xt: random_matrix(B, IN, seed * 7 + 7),
            bank,
        }
    }

    /// G, F then D parameters, in registration order.
    pub fn params(&self) -> Vec<Matrix> {
        [&self.g, &self.f, &self.d]
            .iter()
            .flat_map(|n| n.params().into_iter().cloned())
            .collect()
    }

    fn split(&self, leaves: &[Tensor]) -> (MlpVars, MlpVars, MlpVars) {
        let ng = self.g.params().len();
        let nf = self.f.params().len();
        (
            MlpVars::from_tensors(&leaves[..ng]).unwrap(),
            MlpVars::from_tensors(&leaves[ng..ng + nf]).unwrap(),
            MlpVars::from_tensors(&leaves[ng + nf..]).unwrap(),
        )
    }

    fn features_and_predictions(
        &self,
        g: &mut Graph,
        gv: &MlpVars,
        fv: &MlpVars,
    ) -> Result<[(Tensor, Tensor); 2]> {
        let mut out = Vec::new();
        for x in [&self.xs, &self.xt] {
            let xt = g.constant(x.clone());
            let feats = self.g.forward(g, gv, xt)?;
            let probs = self.f.forward(g, fv, feats)?;
            out.push((feats, probs));
        }
        Ok([out[0], out[1]])
    }

    /// Classification loss on the source batch.
    pub fn l_y(&self, g: &mut Graph, leaves: &[Tensor]) -> Result<Tensor> {
        let (gv, fv, _) = self.split(leaves);
        let [(_, ps), _] = self.features_and_predictions(g, &gv, &fv)?;
        ce_loss(g, ps, &self.ys)
    }

    /// Adversarial loss exactly as training builds it.
    pub fn l_adv(&self, g: &mut Graph, leaves: &[Tensor]) -> Result<Tensor> {
        let (gv, fv, dv) = self.split(leaves);
        let pairs = self.features_and_predictions(g, &gv, &fv)?;
        let mut outs = Vec::new();
        for (f, p) in pairs {
            let c = condition_input(g, &self.strategy, f, p, self.bank.as_ref())?;
            outs.push(self.d.forward(g, &dv, c.input)?);
        }
        adv_loss(g, outs[0], outs[1], None, None)
    }

    /// The same adversarial loss with the prediction branch taken from the
    /// unperturbed networks, so finite differences see it as a constant.
    pub fn l_adv_frozen_branch(&self, g: &mut Graph, leaves: &[Tensor]) -> Result<Tensor> {
        let (gv, fv, dv) = self.split(leaves);
        let live = self.features_and_predictions(g, &gv, &fv)?;
        let frozen_g = self.g.register_frozen(g);
        let frozen_f = self.f.register_frozen(g);
        let base = self.features_and_predictions(g, &frozen_g, &frozen_f)?;
        let mut outs = Vec::new();
        for ((f, _), (f0, p0)) in live.into_iter().zip(base) {
            let input = match condition_input(g, &self.strategy, f0, p0, self.bank.as_ref())?.branch {
                None => f,
                Some(branch) => {
                    let fixed = g.constant(g.value(branch).clone());
                    if self.strategy.kind == ConditioningKind::Multilinear {
                        g.row_outer(f, fixed)?
                    } else {
                        g.concat_cols(f, fixed)?
                    }
                }
            };
            outs.push(self.d.forward(g, &dv, input)?);
        }
        adv_loss(g, outs[0], outs[1], None, None)
    }
}

pub fn all_strategies() -> Vec<ConditioningStrategy> {
    vec![
        ConditioningStrategy::dann(),
        ConditioningStrategy::concat_fp(),
        ConditioningStrategy::sdan(1.0),
        ConditioningStrategy::sdan(3.0),
        ConditioningStrategy::ssdan(3.0),
        ConditioningStrategy::multilinear(),
        ConditioningStrategy::sdan(2.0).with_entropy(),
    ]
}

/// One differentiable primitive wired into a scalar by a random linear
/// read-out, so every output entry carries a distinct upstream gradient.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<Matrix>,
    pub build: Box<dyn Fn(&mut Graph, &[Tensor]) -> Result<Tensor>>,
}

fn read_out(g: &mut Graph, y: Tensor, seed: u64) -> Result<Tensor> {
    let (r, c) = y.shape();
    let w = g.constant(random_matrix(r, c, seed));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let m = |r, c, k: u64| random_matrix(r, c, seed * 31 + k);
    let pos = |x: Matrix| x.map(|v| v.abs() + 0.5);
    let ro = seed * 31 + 30;
    macro_rules! case {
        ($name:expr, [$($input:expr),*], |$g:ident, $x:ident| $body:expr) => {
            PrimitiveCase {
                name: $name,
                inputs: vec![$($input),*],
                build: Box::new(move |$g: &mut Graph, $x: &[Tensor]| {
                    let y = $body;
                    read_out($g, y, ro)
                }),
            }
        };
    }
    vec![
        case!("matmul", [m(3, 4, 1), m(4, 2, 2)], |g, x| g.matmul(x[0], x[1])?),
        case!("add_bias", [m(3, 4, 1), m(1, 4, 2)], |g, x| g.add_bias(x[0], x[1])?),
        case!("add", [m(3, 4, 1), m(3, 4, 2)], |g, x| g.add(x[0], x[1])?),
        case!("mul", [m(3, 4, 1), m(3, 4, 2)], |g, x| g.mul(x[0], x[1])?),
        case!("scale", [m(3, 4, 1)], |g, x| g.scale(x[0], -2.5)),
        case!("add_scalar", [m(3, 4, 1)], |g, x| g.add_scalar(x[0], 0.7)),
        case!("relu", [m(3, 4, 1)], |g, x| g.relu(x[0])),
        case!("sigmoid", [m(3, 4, 1)], |g, x| g.sigmoid(x[0])),
        case!("log", [pos(m(3, 4, 1))], |g, x| g.log(x[0])?),
        case!("exp", [m(3, 4, 1)], |g, x| g.exp(x[0])),
        case!("neg", [m(3, 4, 1)], |g, x| g.neg(x[0])),
        case!("clamped_log", [pos(m(3, 4, 1))], |g, x| g.clamped_log(x[0], 1e-12)),
        case!("clamp_min", [m(3, 4, 1)], |g, x| g.clamp_min(x[0], 0.1)),
        case!("recip", [pos(m(3, 4, 1))], |g, x| g.recip(x[0])?),
        case!("softmax_rows", [m(3, 4, 1)], |g, x| g.softmax_rows(x[0])?),
        case!("concat_cols", [m(3, 4, 1), m(3, 2, 2)], |g, x| g.concat_cols(x[0], x[1])?),
        case!("row_l2_norm", [m(3, 4, 1)], |g, x| g.row_l2_norm(x[0])),
        case!("row_scale", [m(3, 4, 1), m(3, 1, 2)], |g, x| g.row_scale(x[0], x[1])?),
        case!("row_outer", [m(3, 4, 1), m(3, 2, 2)], |g, x| g.row_outer(x[0], x[1])?),
        case!("sum", [m(3, 4, 1)], |g, x| g.sum(x[0])),
        case!("mean", [m(3, 4, 1)], |g, x| g.mean(x[0])?),
        case!("select_cols", [m(3, 4, 1)], |g, x| g.select_cols(x[0], &[2, 0, 3])?),
    ]
}

/// A random sequence of labelled feature batches for the prototype bank.
pub struct BankSequence {
    pub classes: usize,
    pub dim: usize,
    pub lambda_ema: f64,
    pub batches: Vec<(Matrix, Vec<usize>)>,
}

impl BankSequence {
    /// Some batches leave classes out, and the last class may never appear.
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let classes = rng.random_range(2..6);
        let dim = rng.random_range(1..7);
        let lambda_ema = if seed % 10 == 0 { 1.0 } else { rng.random_range(0.0..1.0) };
        let reachable = if seed % 7 == 0 { classes - 1 } else { classes };
        let steps = rng.random_range(1..15);
        let batches = (0..steps)
            .map(|i| {
                let rows = rng.random_range(1..9);
                let span = if rng.random_bool(0.4) { 1 } else { reachable };
                let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..span)).collect();
                (random_matrix(rows, dim, seed * 1000 + i as u64), labels)
            })
            .collect();
        BankSequence {
            classes,
            dim,
            lambda_ema,
            batches,
        }
    }

    /// Prototypes written as an explicit weighted sum over every batch mean of
    /// each class: the first mean weighted by λ^(n-1), the j-th later one by
    /// (1-λ)·λ^(n-j).
    pub fn oracle(&self) -> (Matrix, Vec<bool>) {
        let lam = self.lambda_ema;
        let mut means: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.classes];
        for (x, labels) in &self.batches {
            for e in 0..self.classes {
                let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == e).collect();
                if rows.is_empty() {
                    continue;
                }
                let mean = (0..self.dim)
                    .map(|j| rows.iter().map(|&i| x.get(i, j)).sum::<f64>() / rows.len() as f64)
                    .collect();
                means[e].push(mean);
            }
        }
        let mut out = Matrix::zeros(self.classes, self.dim);
        for (e, seen) in means.iter().enumerate() {
            let n = seen.len();
            for (j, m) in seen.iter().enumerate() {
                let w = if j == 0 {
                    lam.powi(n as i32 - 1)
                } else {
                    (1.0 - lam) * lam.powi((n - 1 - j) as i32)
                };
                for (c, v) in m.iter().enumerate() {
                    out.set(e, c, out.get(e, c) + w * v);
                }
            }
        }
        (out, means.iter().map(|m| !m.is_empty()).collect())
    }
}

pub struct BankCheck {
    pub max_gap: f64,
    pub absent_untouched: bool,
    pub initialized_match: bool,
}

/// Replays `seq` through the production bank and compares with the oracle.
pub fn check_bank(seq: &BankSequence) -> BankCheck {
    let mut bank = PrototypeBank::new(seq.classes, seq.dim, seq.lambda_ema).unwrap();
    let mut absent_untouched = true;
    for (x, labels) in &seq.batches {
        let before = bank.prototypes().clone();
        let (means, present) = batch_prototypes(x, labels, seq.classes).unwrap();
        bank.ema_update(&means, &present).unwrap();
        for e in (0..seq.classes).filter(|&e| !labels.contains(&e)) {
            absent_untouched &= bank.prototypes().row(e) == before.row(e);
        }
    }
    let (expect, seen) = seq.oracle();
    let max_gap = bank
        .prototypes()
        .as_slice()
        .iter()
        .zip(expect.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    BankCheck {
        max_gap,
        absent_untouched,
        initialized_match: bank.initialized() == seen.as_slice(),
    }
}

/// With λ_ema = 1 a fully initialised bank never moves.
pub fn frozen_bank_stays_put(seq: &BankSequence, seed: u64) -> bool {
    let mut bank = PrototypeBank::random(seq.classes, seq.dim, 1.0, seed).unwrap();
    let start = bank.clone();
    for (x, labels) in &seq.batches {
        let (means, present) = batch_prototypes(x, labels, seq.classes).unwrap();
        bank.ema_update(&means, &present).unwrap();
    }
    bank == start
}

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

/// Worst relative error over every primitive and seed, with its case name.
pub fn worst_primitive_error(seeds: u64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for seed in 0..seeds {
        for case in primitive_cases(seed) {
            let a = analytic_grads(&case.build, &case.inputs).unwrap();
            let n = numerical_grads(&case.build, &case.inputs, GRAD_H).unwrap();
            let err = max_rel_error(&a, &n);
            if err >= worst.0 {
                worst = (err, format!("{} seed {seed}", case.name));
            }
        }
    }
    worst
}

pub fn worst_l_y_error(seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let fx = Fixture::smooth(ConditioningStrategy::dann(), seed);
            let build = |g: &mut _, x: &[_]| fx.l_y(g, x);
            let params = fx.params();
            max_rel_error(
                &analytic_grads(&build, &params).unwrap(),
                &numerical_grads(&build, &params, GRAD_H).unwrap(),
            )
        })
        .fold(0.0, f64::max)
}

/// Production analytic gradient of L_adv against finite differences of the
/// frozen-branch oracle.
pub fn worst_adv_error(strategy: &ConditioningStrategy, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let fx = Fixture::smooth(strategy.clone(), seed);
            let production = |g: &mut _, x: &[_]| fx.l_adv(g, x);
            let oracle = |g: &mut _, x: &[_]| fx.l_adv_frozen_branch(g, x);
            let params = fx.params();
            max_rel_error(
                &analytic_grads(&production, &params).unwrap(),
                &numerical_grads(&oracle, &params, GRAD_H).unwrap(),
            )
        })
        .fold(0.0, f64::max)
}

pub fn gradcheck_strategies() -> Vec<ConditioningStrategy> {
    vec![
        ConditioningStrategy::dann(),
        ConditioningStrategy::sdan(1.0),
        ConditioningStrategy::sdan(3.0),
        ConditioningStrategy::ssdan(1.0),
        ConditioningStrategy::ssdan(3.0),
        ConditioningStrategy::concat_fp(),
        ConditioningStrategy::multilinear(),
    ]
}

/// swap3 cut down to 150 samples per domain.
pub fn small_swap3() -> (Dataset, Dataset) {
    let mut spec = DomainShiftSpec::swap3(11);
    spec.n_source = 150;
    spec.n_target = 150;
    generate(&spec).unwrap()
}

pub fn small_config(strategy: ConditioningStrategy, iterations: usize) -> TrainConfig {
    TrainConfig {
        strategy,
        iterations,
        batch_size: 16,
        eval_every: 10,
        network: NetworkSpec {
            feature_hidden: vec![16],
            feature_dim: 16,
            ..NetworkSpec::default()
        },
        ..TrainConfig::default()
    }
}

/// A state a few iterations into training, so velocities are non-zero.
pub fn warmed(cfg: &TrainConfig, s: &Dataset, t: &Dataset, steps: usize) -> TrainState {
    let trainer = Trainer::new(cfg, s, t).unwrap();
    let mut state = trainer.init_state(3).unwrap();
    for _ in 0..steps {
        trainer.step(&mut state, UpdatePath::Grl).unwrap();
    }
    state
}

pub fn all_params(state: &TrainState) -> Vec<Matrix> {
    [&state.g, &state.f, &state.d]
        .iter()
        .flat_map(|n| n.params().into_iter().cloned())
        .collect()
}

fn fixed_batch(s: &Dataset, t: &Dataset, seed: u64) -> (Matrix, Vec<usize>, Matrix) {
    let mut rng = seeded(seed);
    let rows: Vec<usize> = (0..16).map(|_| rng.random_range(0..s.len().min(t.len()))).collect();
    let labels = s.train_labels().unwrap();
    (
        s.features().select_rows(&rows),
        rows.iter().map(|&i| labels[i]).collect(),
        t.features().select_rows(&rows),
    )
}

/// Max-abs gap between the parameter deltas of one GRL iteration and one
/// explicit alternating iteration from the same warmed state.
pub fn grl_explicit_gap(strategy: &ConditioningStrategy, seed: u64) -> f64 {
    let (s, t) = small_swap3();
    let mut cfg = small_config(strategy.clone(), 100);
    cfg.lambda = LambdaSchedule::constant(0.7);
    cfg.seed = seed;
    let start = warmed(&cfg, &s, &t, 5);
    let (xs, ys, xt) = fixed_batch(&s, &t, seed);
    let mut a = start.clone();
    let mut b = start.clone();
    train_iteration(&mut a, &xs, &ys, &xt, &cfg, UpdatePath::Grl).unwrap();
    train_iteration(&mut b, &xs, &ys, &xt, &cfg, UpdatePath::Explicit).unwrap();
    let before = all_params(&start);
    let delta = |state: &TrainState| -> Vec<Matrix> {
        all_params(state).iter().zip(&before).map(|(x, y)| x.zip_map(y, |u, v| u - v)).collect()
    };
    let (da, db) = (delta(&a), delta(&b));
    assert!(da.iter().any(|m| m.max_abs() > 0.0), "no update happened");
    da.iter()
        .zip(&db)
        .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()))
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

/// Largest entry of ∂L_adv/∂Θ_f after a few warm-up iterations.
pub fn adversarial_grad_on_classifier(strategy: &ConditioningStrategy, seed: u64) -> f64 {
    let (s, t) = small_swap3();
    let mut cfg = small_config(strategy.clone(), 100);
    cfg.seed = seed;
    let mut state = warmed(&cfg, &s, &t, 3);
    let (xs, ys, xt) = fixed_batch(&s, &t, seed);
    let out = train_iteration(&mut state, &xs, &ys, &xt, &cfg, UpdatePath::Explicit).unwrap();
    assert!(out.grads.g.iter().any(|m| m.max_abs() > 0.0), "generator got no gradient");
    out.grads.f_from_adv.unwrap().iter().map(|m| m.max_abs()).fold(0.0, f64::max)
}
