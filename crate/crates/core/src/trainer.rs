//! The adversarial training loop shared by every conditioning strategy.
//!
//! One iteration:
//!
//! 1. sample a labeled source batch and an unlabeled target batch
//!    (uniformly, with replacement);
//! 2. run `G` then `F` on both;
//! 3. for `ssdan`, fold the source batch's class means into the prototype
//!    bank (features enter the bank detached);
//! 4. build the discriminator input for the configured strategy and compute
//!    the classification loss `L_y` and the adversarial loss `L_adv`;
//! 5. update `G` with `∇[L_y - λ L_adv]`, `F` with `∇L_y` and `D` with
//!    `∇L_adv`.
//!
//! Step 5 runs as a single backward pass through a gradient reversal layer
//! placed between `G`'s features and the discriminator branch. The explicit
//! two-loss form is kept as [`UpdatePath::Explicit`] for equivalence checks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::conditioning::{
    batch_prototypes, condition_input, entropy_weight, row_entropy, ConditioningKind,
    ConditioningStrategy, PrototypeBank,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{adv_loss, ce_loss, LambdaSchedule, LrSchedule};
use crate::matrix::Matrix;
use crate::nn::{codec, forward_d, forward_f, forward_g, init_network, Head, Mlp, SgdMomentum};
use crate::rng::{derive_seed, seeded, Rng, RngState};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const STATE_FORMAT_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;
const STATE_MAGIC: &[u8; 8] = b"SDANSTA\0";
const MODEL_MAGIC: &[u8; 8] = b"SDANMDL\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    /// Hidden widths of the feature extractor.
    pub feature_hidden: Vec<usize>,
    /// Feature dimension `d`.
    pub feature_dim: usize,
    /// Hidden widths of the classifier (empty: one linear layer).
    pub classifier_hidden: Vec<usize>,
    /// Discriminator hidden width as a multiple of its input width.
    pub disc_hidden_factor: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            feature_hidden: vec![32],
            feature_dim: 32,
            classifier_hidden: vec![],
            disc_hidden_factor: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankInit {
    /// Each prototype row is set by the first batch containing its class.
    #[default]
    FirstTouch,
    /// Standard-normal rows before training starts.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: ConditioningStrategy,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_f: f64,
    pub lr_d: f64,
    pub momentum: f64,
    pub lambda: LambdaSchedule,
    pub lr_schedule: LrSchedule,
    pub lambda_ema: f64,
    pub bank_init: BankInit,
    pub seed: u64,
    pub eval_every: usize,
    pub network: NetworkSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: ConditioningStrategy::sdan(1.0),
            iterations: 1000,
            batch_size: 36,
            lr_g: 0.01,
            lr_f: 0.01,
            lr_d: 0.01,
            momentum: 0.9,
            lambda: LambdaSchedule::default(),
            lr_schedule: LrSchedule::Constant,
            lambda_ema: 0.5,
            bank_init: BankInit::FirstTouch,
            seed: 0,
            eval_every: 50,
            network: NetworkSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.lambda.validate()?;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("iterations, batch_size and eval_every must be positive");
        }
        for lr in [self.lr_g, self.lr_f, self.lr_d] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("learning rates must be finite and >= 0");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda_ema) {
            return bad("lambda_ema must lie in [0, 1]");
        }
        if self.network.feature_dim == 0 || self.network.disc_hidden_factor == 0 {
            return bad("network sizes must be positive");
        }
        Ok(())
    }

    pub fn progress(&self, iteration: usize) -> f64 {
        iteration as f64 / self.iterations as f64
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub g: Mlp,
    pub f: Mlp,
    pub d: Mlp,
    pub opt_g: SgdMomentum,
    pub opt_f: SgdMomentum,
    pub opt_d: SgdMomentum,
    pub bank: Option<PrototypeBank>,
    pub rng: Rng,
    pub iteration: usize,
}

impl TrainState {
    pub fn init(config: &TrainConfig, input_dim: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes == 0 || input_dim == 0 {
            return Err(Error::Config("input_dim and classes must be positive".into()));
        }
        let net = &config.network;
        let dim = net.feature_dim;
        let mut g_sizes = vec![input_dim];
        g_sizes.extend(&net.feature_hidden);
        g_sizes.push(dim);
        let mut f_sizes = vec![dim];
        f_sizes.extend(&net.classifier_hidden);
        f_sizes.push(classes);
        let width = config.strategy.input_width(dim, classes);
        let d_sizes = [width, width * net.disc_hidden_factor, 1];

        let g = init_network(&g_sizes, Head::None, derive_seed(config.seed, 1))?;
        let f = init_network(&f_sizes, Head::Softmax, derive_seed(config.seed, 2))?;
        let d = init_network(&d_sizes, Head::Sigmoid, derive_seed(config.seed, 3))?;
        let bank = match config.strategy.kind {
            ConditioningKind::Ssdan => Some(match config.bank_init {
                BankInit::FirstTouch => PrototypeBank::new(classes, dim, config.lambda_ema)?,
                BankInit::Random => {
                    PrototypeBank::random(classes, dim, config.lambda_ema, derive_seed(config.seed, 4))?
                }
            }),
            _ => None,
        };
        Ok(TrainState {
            opt_g: SgdMomentum::new(&g, config.lr_g, config.momentum),
            opt_f: SgdMomentum::new(&f, config.lr_f, config.momentum),
            opt_d: SgdMomentum::new(&d, config.lr_d, config.momentum),
            g,
            f,
            d,
            bank,
            rng: seeded(derive_seed(config.seed, 5)),
            iteration: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.f.output_size()
    }

    pub fn model(&self) -> Model {
        Model {
            iteration: self.iteration,
            g: self.g.clone(),
            f: self.f.clone(),
            d: self.d.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(STATE_MAGIC);
        codec::put_u32(&mut w, STATE_FORMAT_VERSION);
        codec::put_u64(&mut w, self.iteration as u64);
        let rs = RngState::capture(&self.rng);
        w.extend_from_slice(&rs.seed);
        codec::put_u64(&mut w, rs.stream);
        w.extend_from_slice(&rs.word_pos.to_le_bytes());
        for net in [&self.g, &self.f, &self.d] {
            net.encode(&mut w);
        }
        for opt in [&self.opt_g, &self.opt_f, &self.opt_d] {
            opt.encode(&mut w);
        }
        match &self.bank {
            None => w.push(0),
            Some(bank) => {
                w.push(1);
                let m = bank.prototypes();
                codec::put_u64(&mut w, m.rows() as u64);
                codec::put_u64(&mut w, m.cols() as u64);
                codec::put_f64(&mut w, bank.lambda_ema());
                w.extend(bank.initialized().iter().map(|&b| b as u8));
                codec::put_f64s(&mut w, m.as_slice());
            }
        }
        w
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = codec::Reader::new(buf);
        check_header(&mut r, STATE_MAGIC, STATE_FORMAT_VERSION)?;
        let iteration = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let rng = RngState {
            seed,
            stream,
            word_pos,
        }
        .restore();
        let g = Mlp::decode(&mut r)?;
        let f = Mlp::decode(&mut r)?;
        let d = Mlp::decode(&mut r)?;
        let opt_g = SgdMomentum::decode(&mut r, &g)?;
        let opt_f = SgdMomentum::decode(&mut r, &f)?;
        let opt_d = SgdMomentum::decode(&mut r, &d)?;
        let bank = match r.u8()? {
            0 => None,
            1 => {
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                let lambda = r.f64()?;
                let init = r.take(rows)?.iter().map(|&b| b != 0).collect();
                let m = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
                Some(PrototypeBank::from_parts(m, lambda, init))
            }
            t => return Err(Error::Data(format!("bad bank tag {t}"))),
        };
        if !r.is_done() {
            return Err(Error::Data("trailing bytes after state checkpoint".into()));
        }
        Ok(TrainState {
            g,
            f,
            d,
            opt_g,
            opt_f,
            opt_d,
            bank,
            rng,
            iteration,
        })
    }
}

fn check_header(r: &mut codec::Reader<'_>, magic: &[u8; 8], version: u32) -> Result<()> {
    if r.take(8)? != magic {
        return Err(Error::Data("not a checkpoint of the expected kind".into()));
    }
    let v = r.u32()?;
    if v != version {
        return Err(Error::Data(format!(
            "checkpoint format version {v}, expected {version}"
        )));
    }
    Ok(())
}

/// The three networks at one point in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub iteration: usize,
    pub g: Mlp,
    pub f: Mlp,
    pub d: Mlp,
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        self.g.output_size()
    }

    pub fn classes(&self) -> usize {
        self.f.output_size()
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.g.predict(x)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let feats = self.g.predict(x)?;
        self.f.predict(&feats)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MODEL_MAGIC);
        codec::put_u32(&mut w, MODEL_FORMAT_VERSION);
        codec::put_u64(&mut w, self.iteration as u64);
        for net in [&self.g, &self.f, &self.d] {
            net.encode(&mut w);
        }
        w
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = codec::Reader::new(buf);
        check_header(&mut r, MODEL_MAGIC, MODEL_FORMAT_VERSION)?;
        let iteration = r.u64()? as usize;
        let g = Mlp::decode(&mut r)?;
        let f = Mlp::decode(&mut r)?;
        let d = Mlp::decode(&mut r)?;
        if !r.is_done() {
            return Err(Error::Data("trailing bytes after model checkpoint".into()));
        }
        Ok(Model { iteration, g, f, d })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdatePath {
    /// One backward pass of `L_y + L_adv` through a gradient reversal layer.
    Grl,
    /// Separate backward passes of `L_y` and `L_adv`, combined by hand.
    Explicit,
}

/// Per-network gradients produced by one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub g: Vec<Matrix>,
    pub f: Vec<Matrix>,
    pub d: Vec<Matrix>,
    /// Gradient reaching the classifier from `L_adv` alone.
    pub f_from_adv: Option<Vec<Matrix>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub feature_norm: f64,
    pub branch_norm: Option<f64>,
}

impl NormStats {
    pub fn ratio(&self) -> Option<f64> {
        self.branch_norm.map(|b| self.feature_norm / b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub l_y: f64,
    pub l_adv: f64,
    pub lambda: f64,
    /// Width of the discriminator input actually built this iteration.
    pub disc_input_width: usize,
    pub norms: NormStats,
    pub bank_fallback: bool,
    pub grads: StepGrads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean of per-class recalls over classes present in the labels.
    pub per_class_accuracy: f64,
    pub class_recall: Vec<Option<f64>>,
    pub mean_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub iteration: usize,
    pub l_y: f64,
    pub l_adv: f64,
    pub lambda_adv: f64,
    pub target_acc: f64,
    pub target_per_class_acc: f64,
    pub target_class_recall: Vec<Option<f64>>,
    pub source_acc: f64,
    pub disc_domain_acc: f64,
    pub target_mean_entropy: f64,
    pub feature_norm: f64,
    pub branch_norm: Option<f64>,
    pub norm_ratio: Option<f64>,
}

/// Drives training for one configuration and one pair of datasets.
///
/// The source dataset supplies labels; the target dataset is read only
/// through its features during training. Its labels are touched only by
/// evaluation.
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    source: &'a Dataset,
    source_labels: Vec<usize>,
    target: &'a Dataset,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, source: &'a Dataset, target: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data("source and target must be non-empty".into()));
        }
        if source.input_dim() != target.input_dim() {
            return Err(Error::Shape {
                op: "source vs target features",
                lhs: source.features().shape(),
                rhs: target.features().shape(),
            });
        }
        let source_labels = source.train_labels()?;
        Ok(Trainer {
            config,
            source,
            source_labels,
            target,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        self.config
    }

    pub fn init_state(&self, classes: usize) -> Result<TrainState> {
        TrainState::init(self.config, self.source.input_dim(), classes)
    }

    /// One training iteration on freshly sampled batches.
    pub fn step(&self, state: &mut TrainState, path: UpdatePath) -> Result<StepOutcome> {
        let b = self.config.batch_size;
        let (src_idx, tgt_idx) = sample_indices(&mut state.rng, b, self.source.len(), self.target.len());
        let xs = self.source.features().select_rows(&src_idx);
        let ys: Vec<usize> = src_idx.iter().map(|&i| self.source_labels[i]).collect();
        let xt = self.target.features().select_rows(&tgt_idx);
        train_iteration(state, &xs, &ys, &xt, self.config, path)
    }

    /// Full run from a fresh state.
    pub fn run(&self, classes: usize) -> Result<RunOutput> {
        let state = self.init_state(classes)?;
        self.run_from(state, |_| {})
    }

    /// Continues `state` to the configured iteration count, calling `sink`
    /// with every metrics record as it is produced.
    pub fn run_from(&self, state: TrainState, sink: impl FnMut(&MetricsRecord)) -> Result<RunOutput> {
        self.run_observed(state, sink, |_, _| {})
    }

    /// As [`Trainer::run_from`]; on a numerical failure `on_failure` sees
    /// the state the failing iteration started from before the error is
    /// returned.
    pub fn run_observed(
        &self,
        mut state: TrainState,
        mut sink: impl FnMut(&MetricsRecord),
        on_failure: impl FnOnce(&TrainState, &Error),
    ) -> Result<RunOutput> {
        let mut records = Vec::new();
        let mut history: Vec<(Model, f64)> = Vec::new();
        while state.iteration < self.config.iterations {
            // a failing iteration has touched only these two
            let rng = state.rng.clone();
            let bank = state.bank.clone();
            let outcome = match self.step(&mut state, UpdatePath::Grl) {
                Ok(o) => o,
                Err(e) => {
                    if matches!(e, Error::Numerical(_)) {
                        state.rng = rng;
                        state.bank = bank;
                        on_failure(&state, &e);
                    }
                    return Err(e);
                }
            };
            if state.iteration % self.config.eval_every == 0 {
                let rec = self.record(&state, &outcome)?;
                sink(&rec);
                history.push((state.model(), rec.target_mean_entropy));
                records.push(rec);
            }
        }
        let selected = match select_model(&history) {
            Some(i) => history.swap_remove(i).0,
            None => state.model(),
        };
        let target_eval = evaluate(&selected, self.target)?;
        let source_eval = evaluate(&selected, self.source)?;
        Ok(RunOutput {
            records,
            selected,
            target_eval,
            source_eval,
            state,
        })
    }

    fn record(&self, state: &TrainState, outcome: &StepOutcome) -> Result<MetricsRecord> {
        let model = state.model();
        let t = evaluate(&model, self.target)?;
        let s = evaluate(&model, self.source)?;
        let disc = domain_accuracy(
            &model,
            &self.config.strategy,
            state.bank.as_ref(),
            self.source.features(),
            self.target.features(),
        )?;
        Ok(MetricsRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            iteration: state.iteration,
            l_y: outcome.l_y,
            l_adv: outcome.l_adv,
            lambda_adv: outcome.lambda,
            target_acc: t.accuracy,
            target_per_class_acc: t.per_class_accuracy,
            target_class_recall: t.class_recall,
            source_acc: s.accuracy,
            disc_domain_acc: disc,
            target_mean_entropy: t.mean_entropy,
            feature_norm: outcome.norms.feature_norm,
            branch_norm: outcome.norms.branch_norm,
            norm_ratio: outcome.norms.ratio(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    /// Checkpoint with the lowest mean target entropy.
    pub selected: Model,
    pub target_eval: Evaluation,
    pub source_eval: Evaluation,
    pub state: TrainState,
}

fn sample_indices(rng: &mut Rng, b: usize, ns: usize, nt: usize) -> (Vec<usize>, Vec<usize>) {
    use rand::Rng as _;
    let s = (0..b).map(|_| rng.random_range(0..ns)).collect();
    let t = (0..b).map(|_| rng.random_range(0..nt)).collect();
    (s, t)
}

/// One update of `G`, `F`, `D` (and the prototype bank) on given batches.
/// `xt` carries no labels. Non-finite values anywhere in the iteration are
/// reported as [`Error::Numerical`].
pub fn train_iteration(
    state: &mut TrainState,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    config: &TrainConfig,
    path: UpdatePath,
) -> Result<StepOutcome> {
    let iteration = state.iteration;
    iteration_inner(state, xs, ys, xt, config, path).map_err(|e| match e {
        Error::Domain { op, index, value } if !value.is_finite() => Error::Numerical(format!(
            "non-finite value reached {op} at iteration {iteration} (entry {index} = {value})"
        )),
        other => other,
    })
}

fn iteration_inner(
    state: &mut TrainState,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    config: &TrainConfig,
    path: UpdatePath,
) -> Result<StepOutcome> {
    let progress = config.progress(state.iteration);
    let lambda = config.lambda.at(progress);
    let lr_scale = config.lr_schedule.factor(progress);
    let strategy = &config.strategy;

    let mut g = Graph::new();
    let gv = state.g.register(&mut g);
    let fv = state.f.register(&mut g);
    let dv = state.d.register(&mut g);
    let xs_t = g.constant(xs.clone());
    let xt_t = g.constant(xt.clone());

    let fs = forward_g(&state.g, &mut g, &gv, xs_t)?;
    let ft = forward_g(&state.g, &mut g, &gv, xt_t)?;
    let ps = forward_f(&state.f, &mut g, &fv, fs)?;
    let pt = forward_f(&state.f, &mut g, &fv, ft)?;

    if let Some(bank) = state.bank.as_mut() {
        let (m_batch, present) = batch_prototypes(g.value(fs), ys, bank.classes())?;
        bank.ema_update(&m_batch, &present)?;
    }

    let l_y = ce_loss(&mut g, ps, ys)?;

    let (fs_adv, ft_adv) = match path {
        UpdatePath::Grl => (g.grad_reverse(fs, lambda)?, g.grad_reverse(ft, lambda)?),
        UpdatePath::Explicit => (fs, ft),
    };
    let cs = condition_input(&mut g, strategy, fs_adv, ps, state.bank.as_ref())?;
    let ct = condition_input(&mut g, strategy, ft_adv, pt, state.bank.as_ref())?;
    let ds = forward_d(&state.d, &mut g, &dv, cs.input)?;
    let dt = forward_d(&state.d, &mut g, &dv, ct.input)?;
    let (ws, wt) = if strategy.entropy_weighting {
        (Some(entropy_weight(g.value(ps))), Some(entropy_weight(g.value(pt))))
    } else {
        (None, None)
    };
    let l_adv = adv_loss(&mut g, ds, dt, ws.as_ref(), wt.as_ref())?;

    let l_y_val = g.value(l_y).get(0, 0);
    let l_adv_val = g.value(l_adv).get(0, 0);
    if !l_y_val.is_finite() || !l_adv_val.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at iteration {}: L_y = {l_y_val}, L_adv = {l_adv_val}, lambda = {lambda}, \
             finite params: G {} F {} D {}",
            state.iteration,
            state.g.all_finite(),
            state.f.all_finite(),
            state.d.all_finite()
        )));
    }

    let grads = match path {
        UpdatePath::Grl => {
            let total = g.add(l_y, l_adv)?;
            g.backward(total)?;
            StepGrads {
                g: gv.grads(&g),
                f: fv.grads(&g),
                d: dv.grads(&g),
                f_from_adv: None,
            }
        }
        UpdatePath::Explicit => {
            g.backward(l_y)?;
            let g_cls = gv.grads(&g);
            let f_cls = fv.grads(&g);
            g.zero_grads();
            g.backward(l_adv)?;
            let g_adv = gv.grads(&g);
            let f_adv = fv.grads(&g);
            let d_adv = dv.grads(&g);
            let combined = g_cls
                .iter()
                .zip(&g_adv)
                .map(|(c, a)| c.zip_map(a, |u, v| u - lambda * v))
                .collect();
            StepGrads {
                g: combined,
                f: f_cls,
                d: d_adv,
                f_from_adv: Some(f_adv),
            }
        }
    };

    for gr in grads.g.iter().chain(&grads.f).chain(&grads.d) {
        if !gr.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at iteration {}",
                state.iteration
            )));
        }
    }

    state.opt_g.step(&mut state.g, &grads.g, lr_scale)?;
    state.opt_f.step(&mut state.f, &grads.f, lr_scale)?;
    state.opt_d.step(&mut state.d, &grads.d, lr_scale)?;
    state.iteration += 1;

    Ok(StepOutcome {
        l_y: l_y_val,
        l_adv: l_adv_val,
        lambda,
        disc_input_width: cs.input.cols(),
        norms: norm_stats(&g, &[fs, ft], [cs.branch, ct.branch]),
        bank_fallback: cs.fell_back,
        grads,
    })
}

fn norm_stats(g: &Graph, feats: &[Tensor; 2], branches: [Option<Tensor>; 2]) -> NormStats {
    let mean_norm = |ts: &[Tensor]| {
        let norms: Vec<f64> = ts.iter().flat_map(|&t| g.value(t).row_norms()).collect();
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    let branch_norm = match branches {
        [Some(a), Some(b)] => Some(mean_norm(&[a, b])),
        _ => None,
    };
    NormStats {
        feature_norm: mean_norm(feats),
        branch_norm,
    }
}

/// Accuracy, mean per-class recall and mean prediction entropy.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let labels = data.eval_labels()?;
    let probs = model.predict(data.features())?;
    evaluate_predictions(&probs, &labels)
}

pub fn evaluate_predictions(probs: &Matrix, labels: &[usize]) -> Result<Evaluation> {
    if labels.is_empty() || labels.len() != probs.rows() {
        return Err(Error::Data("predictions and labels must be non-empty and aligned".into()));
    }
    let c = probs.cols();
    let pred = probs.argmax_rows();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (&y, &p) in labels.iter().zip(&pred) {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        totals[y] += 1;
        if y == p {
            hits[y] += 1;
        }
    }
    let class_recall: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let present: Vec<f64> = class_recall.iter().flatten().copied().collect();
    let entropies = row_entropy(probs);
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        per_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        class_recall,
        mean_entropy: entropies.iter().sum::<f64>() / entropies.len() as f64,
    })
}

/// Discriminator accuracy at telling source (`D > 0.5`) from target
/// (`D < 0.5`), averaged over the two domains.
pub fn domain_accuracy(
    model: &Model,
    strategy: &ConditioningStrategy,
    bank: Option<&PrototypeBank>,
    source: &Matrix,
    target: &Matrix,
) -> Result<f64> {
    let side = |x: &Matrix, is_source: bool| -> Result<f64> {
        let mut g = Graph::new();
        let gv = model.g.register_frozen(&mut g);
        let fv = model.f.register_frozen(&mut g);
        let dv = model.d.register_frozen(&mut g);
        let xt = g.constant(x.clone());
        let f = forward_g(&model.g, &mut g, &gv, xt)?;
        let p = forward_f(&model.f, &mut g, &fv, f)?;
        let c = condition_input(&mut g, strategy, f, p, bank)?;
        let out = forward_d(&model.d, &mut g, &dv, c.input)?;
        let v = g.value(out).as_slice();
        let correct = v
            .iter()
            .filter(|&&o| if is_source { o > 0.5 } else { o < 0.5 })
            .count();
        Ok(correct as f64 / v.len() as f64)
    };
    Ok(0.5 * (side(source, true)? + side(target, false)?))
}

/// Index of the entry with the lowest entropy; ties go to the latest.
pub fn select_model<T>(history: &[(T, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (_, h)) in history.iter().enumerate() {
        match best {
            Some(b) if history[b].1 < *h => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DomainShiftSpec};

    fn small_config(strategy: ConditioningStrategy) -> TrainConfig {
        TrainConfig {
            strategy,
            iterations: 40,
            batch_size: 12,
            eval_every: 10,
            network: NetworkSpec {
                feature_hidden: vec![8],
                feature_dim: 8,
                ..NetworkSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn select_model_examples() {
        assert_eq!(select_model(&[((), 0.9), ((), 0.4), ((), 0.7)]), Some(1));
        assert_eq!(select_model(&[((), 0.5)]), Some(0));
        assert_eq!(select_model(&[((), 0.4), ((), 0.4)]), Some(1));
        assert_eq!(select_model::<()>(&[]), None);
    }

    #[test]
    fn evaluate_examples() {
        let labels = vec![0, 1, 2, 1, 0, 2];
        let mut perfect = Matrix::zeros(6, 3);
        for (i, &y) in labels.iter().enumerate() {
            perfect.set(i, y, 1.0);
        }
        let e = evaluate_predictions(&perfect, &labels).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.mean_entropy, 0.0);

        let uniform = Matrix::filled(6, 3, 1.0 / 3.0);
        let e = evaluate_predictions(&uniform, &labels).unwrap();
        assert!((e.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!((e.mean_entropy - 3f64.ln()).abs() < 1e-12);

        assert!(evaluate_predictions(&Matrix::zeros(0, 3), &[]).is_err());
    }

    #[test]
    fn per_class_matches_brute_force() {
        // balanced: 4 per class, one error in each class
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let preds = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 0];
        let mut probs = Matrix::zeros(12, 3);
        for (i, &p) in preds.iter().enumerate() {
            probs.set(i, p, 1.0);
        }
        let e = evaluate_predictions(&probs, &labels).unwrap();
        let mut recall_sum = 0.0;
        for c in 0..3 {
            let idx: Vec<usize> = (0..12).filter(|&i| labels[i] == c).collect();
            let ok = idx.iter().filter(|&&i| preds[i] == c).count();
            recall_sum += ok as f64 / idx.len() as f64;
        }
        assert!((e.per_class_accuracy - recall_sum / 3.0).abs() < 1e-15);
        assert!((e.per_class_accuracy - e.accuracy).abs() < 1e-15);
    }

    #[test]
    fn dann_and_sdan_differ_in_disc_width_only() {
        let (s, t) = generate(&DomainShiftSpec::swap3(0)).unwrap();
        for (strategy, width) in [
            (ConditioningStrategy::dann(), 8),
            (ConditioningStrategy::sdan(1.0), 11),
            (ConditioningStrategy::ssdan(1.0), 16),
        ] {
            let cfg = small_config(strategy);
            let trainer = Trainer::new(&cfg, &s, &t).unwrap();
            let mut st = trainer.init_state(3).unwrap();
            let out = trainer.step(&mut st, UpdatePath::Grl).unwrap();
            assert_eq!(out.disc_input_width, width);
        }
    }

    #[test]
    fn ssdan_first_iteration_sets_bank_to_batch_means() {
        let (s, t) = generate(&DomainShiftSpec::swap3(1)).unwrap();
        let cfg = small_config(ConditioningStrategy::ssdan(3.0));
        let mut st = TrainState::init(&cfg, 2, 3).unwrap();
        let before = st.g.clone();
        let labels = s.train_labels().unwrap();
        let idx: Vec<usize> = (0..12).collect();
        let xs = s.features().select_rows(&idx);
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let xt = t.features().select_rows(&idx);
        train_iteration(&mut st, &xs, &ys, &xt, &cfg, UpdatePath::Grl).unwrap();

        let feats = before.predict(&xs).unwrap();
        let bank = st.bank.as_ref().unwrap();
        for e in 0..3 {
            let rows: Vec<usize> = (0..12).filter(|&i| ys[i] == e).collect();
            if rows.is_empty() {
                assert!(!bank.initialized()[e]);
                continue;
            }
            for j in 0..8 {
                let mean = rows.iter().map(|&i| feats.get(i, j)).sum::<f64>() / rows.len() as f64;
                assert!((bank.prototypes().get(e, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_codec_round_trip() {
        let (s, t) = generate(&DomainShiftSpec::swap3(2)).unwrap();
        let cfg = small_config(ConditioningStrategy::ssdan(3.0));
        let trainer = Trainer::new(&cfg, &s, &t).unwrap();
        let mut st = trainer.init_state(3).unwrap();
        for _ in 0..3 {
            trainer.step(&mut st, UpdatePath::Grl).unwrap();
        }
        let back = TrainState::from_bytes(&st.to_bytes()).unwrap();
        assert_eq!(back, st);
        let model = st.model();
        assert_eq!(Model::from_bytes(&model.to_bytes()).unwrap(), model);
        assert!(Model::from_bytes(&st.to_bytes()).is_err());
    }

    #[test]
    fn eval_cadence() {
        let (s, t) = generate(&DomainShiftSpec::swap3(3)).unwrap();
        let mut cfg = small_config(ConditioningStrategy::dann());
        cfg.iterations = 100;
        cfg.eval_every = 5;
        let out = Trainer::new(&cfg, &s, &t).unwrap().run(3).unwrap();
        assert_eq!(out.records.len(), 20);
        assert_eq!(out.records.last().unwrap().iteration, 100);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = TrainConfig::default();
        cfg.strategy.k = -1.0;
        assert!(cfg.validate().is_err());
    }
}
