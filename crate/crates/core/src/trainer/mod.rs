//! The training loop: per iteration, an encoder update on MMD and triplet
//! losses, generator updates on reconstruction and adversarial losses, then
//! discriminator updates.

pub mod checkpoint;
pub mod graph;
mod sink;

use std::collections::BTreeMap;

use autograd::{clip_grad_norm, Adam, AdamConfig, Graph, ParamGroup, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{ensure, Error, Result};
use crate::losses::{median_distance, Estimator, KernelSpec, LossReport};
use crate::networks::{forward, Group, ModelParams, NetConfig};

pub use graph::{BatchIndices, BatchTensors};
pub use sink::{MemorySink, NullSink, RunDirSink, TrainSink};

use graph::{adversarial_terms, build_terms, MmdKernel, Bindings, DiscTerms, Fakes, Inputs, Terms};

/// How the MMD kernel bandwidth is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `mmd_sigma` throughout.
    #[default]
    Fixed,
    /// Median pairwise distance of each batch's features.
    PerBatch,
    /// Median distance of the first batch, kept for the whole run.
    FirstBatch,
}

/// Which side of the adversarial objectives the players optimise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Discriminators maximise the log-likelihoods, generators minimise the
    /// non-saturating `-log D(fake)`.
    #[default]
    NonSaturating,
    /// Generators descend `lambda_rec * L_rec - L_domain - lambda_pose * L_pose`
    /// and discriminators descend `L_domain` and `L_pose`, signs as written in
    /// the training pseudo-code.
    Literal,
}

/// Switches for the loss terms and the `D_P` sharing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_mmd: bool,
    pub use_triplet: bool,
    pub use_rec: bool,
    pub use_pose: bool,
    pub use_domain_adv: bool,
    pub share_dp: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_mmd: true, use_triplet: true, use_rec: true, use_pose: true, use_domain_adv: true, share_dp: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    /// Source pairs per batch.
    pub batch_source: usize,
    /// Target images per batch.
    pub batch_target: usize,
    pub generator_loops: usize,
    pub discriminator_loops: usize,
    pub lambda_tri: f64,
    pub lambda_rec: f64,
    pub lambda_pose: f64,
    pub margin: f64,
    pub lr_encoder: f64,
    pub lr_generator: f64,
    /// Step size of `E_C` in the generator update.
    pub lr_content_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm limit applied per phase.
    pub clip_norm: f64,
    pub estimator: Estimator,
    pub mmd_bandwidth: BandwidthRule,
    /// Centre of the kernel bandwidths under [`BandwidthRule::Fixed`].
    pub mmd_sigma: f64,
    pub adversarial: AdversarialForm,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Steps between translation grids; 0 disables them.
    pub grid_every: u64,
    pub ablation: Ablation,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 3000,
            batch_source: 16,
            batch_target: 16,
            generator_loops: 1,
            discriminator_loops: 1,
            lambda_tri: 1.0,
            lambda_rec: 10.0,
            lambda_pose: 0.1,
            margin: 0.5,
            lr_encoder: 1e-4,
            lr_generator: 2e-4,
            lr_content_generator: 5e-5,
            lr_discriminator: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            clip_norm: 5.0,
            estimator: Estimator::Biased,
            mmd_bandwidth: BandwidthRule::Fixed,
            mmd_sigma: 1.0,
            adversarial: AdversarialForm::NonSaturating,
            checkpoint_every: 1000,
            grid_every: 500,
            ablation: Ablation::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_tri", self.lambda_tri), ("lambda_rec", self.lambda_rec), ("lambda_pose", self.lambda_pose)] {
            ensure!(v >= 0.0 && v.is_finite(), "{name} must be non-negative, got {v}");
        }
        ensure!(self.margin > 0.0 && self.margin.is_finite(), "margin must be positive");
        ensure!(self.batch_source >= 2 && self.batch_target >= 2, "batch sizes must be at least 2");
        ensure!(self.generator_loops >= 1 && self.discriminator_loops >= 1, "loop counts must be at least 1");
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_generator", self.lr_generator),
            ("lr_content_generator", self.lr_content_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("clip_norm", self.clip_norm),
            ("mmd_sigma", self.mmd_sigma),
        ] {
            ensure!(v > 0.0 && v.is_finite(), "{name} must be positive, got {v}");
        }
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "Adam betas must lie in [0, 1)");
        self.net.validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }
}

/// The three update phases of an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Encoder,
    Generator,
    Discriminator,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Encoder => "encoder",
            Phase::Generator => "generator",
            Phase::Discriminator => "discriminator",
        }
    }

    pub fn from_name(s: &str) -> Option<Phase> {
        [Phase::Encoder, Phase::Generator, Phase::Discriminator].into_iter().find(|p| p.name() == s)
    }

    /// Parameter groups this phase may change.
    pub fn groups<T: autograd::Scalar>(self, params: &ModelParams<T>) -> Vec<Group> {
        match self {
            Phase::Encoder => vec![Group::ContentEncoder],
            Phase::Generator => {
                vec![Group::ContentEncoder, Group::PoseEncoder, Group::SourceGenerator, Group::TargetGenerator]
            }
            Phase::Discriminator => {
                let mut g = vec![Group::SourceDiscriminator, Group::TargetDiscriminator, Group::PoseDiscriminator];
                if !params.shares_pose_disc() {
                    g.push(Group::TargetPoseDiscriminator);
                }
                g
            }
        }
    }

    fn lr(self, group: Group, cfg: &TrainConfig) -> f64 {
        match (self, group) {
            (Phase::Encoder, _) => cfg.lr_encoder,
            (Phase::Generator, Group::ContentEncoder) => cfg.lr_content_generator,
            (Phase::Generator, _) => cfg.lr_generator,
            (Phase::Discriminator, _) => cfg.lr_discriminator,
        }
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    /// One Adam state per phase and group.
    pub optimizers: BTreeMap<(Phase, Group), Adam<f32>>,
    /// Completed iterations.
    pub step: u64,
    /// Drives batch sampling.
    pub rng: ChaCha8Rng,
    /// MMD median bandwidth under [`BandwidthRule::FirstBatch`].
    pub mmd_bandwidth: Option<f64>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(&cfg.net, cfg.ablation.share_dp, &mut rng)?;
        let mut optimizers = BTreeMap::new();
        for phase in [Phase::Encoder, Phase::Generator, Phase::Discriminator] {
            for group in phase.groups(&params) {
                optimizers.insert((phase, group), Adam::new(cfg.adam(phase.lr(group, cfg)), params.get(group)));
            }
        }
        Ok(Self { params, optimizers, step: 0, rng, mmd_bandwidth: None })
    }

    /// Checks that the state can be trained further under `cfg`.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        ensure!(
            self.params.shares_pose_disc() == cfg.ablation.share_dp,
            "checkpoint and config disagree on share_dp"
        );
        let fresh = ModelParams::<f32>::init(&cfg.net, cfg.ablation.share_dp, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (group, p) in fresh.groups() {
            let q = self.params.get(group);
            ensure!(
                p.iter().map(|(k, t)| (k, t.shape())).eq(q.iter().map(|(k, t)| (k, t.shape()))),
                "parameters of group {} do not match the network config",
                group.name()
            );
        }
        Ok(())
    }
}

/// Draws the step's batch: `n_s` same-identity source pairs over distinct
/// identities and `n_t` target images.
pub fn sample_batch(data: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> BatchIndices {
    let pairs = data.source.sample_pair_batch(cfg.batch_source, rng);
    let target = data.target.sample_images(cfg.batch_target, rng);
    BatchIndices { source_pairs: pairs.into_iter().map(|p| (p.first, p.second)).collect(), target }
}

fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    ensure!(
        data.height() == cfg.net.height && data.width() == cfg.net.width,
        "dataset images are {}x{} but the network expects {}x{}",
        data.height(),
        data.width(),
        cfg.net.height,
        cfg.net.width
    );
    data.source.check_sampleable()?;
    ensure!(!data.target.is_empty(), "target domain is empty");
    Ok(())
}

fn value(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

fn record(g: &Graph<f32>, t: &Terms, r: &mut LossReport) {
    let v = |x: Option<Var>| x.map(|x| value(g, x));
    r.mmd = v(t.mmd);
    r.triplet = v(t.triplet);
    r.rec_s = v(t.rec_s);
    r.rec_t = v(t.rec_t);
}

fn record_adversarial(g: &Graph<f32>, t: &DiscTerms, r: &mut LossReport) {
    let d = |x: Option<crate::losses::AdversarialVars>| x.map(|a| value(g, a.d_objective));
    r.domain_s = d(t.domain_s);
    r.domain_t = d(t.domain_t);
    r.pose_s = d(t.pose_s);
    r.pose_t = d(t.pose_t);
}

fn check_finite(r: &LossReport, step: u64) -> Result<()> {
    match r.first_non_finite() {
        Some(term) => Err(Error::NonFinite { term: term.to_string(), step }),
        None => Ok(()),
    }
}

fn kernel_for(state: &mut TrainState, cfg: &TrainConfig, bt: &BatchTensors<f32>) -> Result<Option<MmdKernel>> {
    if !cfg.ablation.use_mmd {
        return Ok(None);
    }
    let sigma = match (cfg.mmd_bandwidth, state.mmd_bandwidth) {
        (BandwidthRule::PerBatch, _) => return Ok(Some(MmdKernel::PerBatch(cfg.estimator))),
        (BandwidthRule::Fixed, _) => cfg.mmd_sigma,
        (BandwidthRule::FirstBatch, Some(s)) => s,
        (BandwidthRule::FirstBatch, None) => {
            let mut g = Graph::new();
            let p = state.params.get(Group::ContentEncoder).bind(&mut g, false);
            let xs = g.constant(bt.xs.clone());
            let xt = g.constant(bt.xt.clone());
            let fs = forward::content_encoder(&mut g, &p, &cfg.net, xs);
            let ft = forward::content_encoder(&mut g, &p, &cfg.net, xt);
            let s = median_distance(g.value(fs), g.value(ft))?;
            log::info!("MMD median bandwidth {s:.4}");
            state.mmd_bandwidth = Some(s);
            s
        }
    };
    Ok(Some(MmdKernel::Fixed(KernelSpec::around(sigma, cfg.estimator)?)))
}

/// Result of the forward pass that feeds the encoder and generator phases.
struct ForwardPass {
    encoder: Option<ParamGroup<f32>>,
    generator: Option<BTreeMap<Group, ParamGroup<f32>>>,
    fakes: Option<[Tensor<f32>; 5]>,
}

fn forward_pass(
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    bt: &BatchTensors<f32>,
    kernel: Option<&MmdKernel>,
    report: &mut LossReport,
    step: u64,
) -> Result<ForwardPass> {
    let ab = &cfg.ablation;
    let gen_on = ab.generator_active();
    let trainable = |g: Group| {
        g == Group::ContentEncoder
            || (gen_on && matches!(g, Group::PoseEncoder | Group::SourceGenerator | Group::TargetGenerator))
    };
    let mut g = Graph::new();
    let b = Bindings::new(&mut g, params, trainable);
    let x = Inputs::new(&mut g, bt);
    let terms = build_terms(&mut g, &b, params, &cfg.net, cfg, x, &bt.ids, kernel);
    record(&g, &terms, report);
    let enc = graph::encoder_objective(&mut g, cfg, &terms);
    let gen = graph::generator_objective(&mut g, cfg, &terms);
    report.encoder_total = enc.map(|v| value(&g, v));
    report.generator_total = gen.map(|v| value(&g, v));
    check_finite(report, step)?;

    let encoder = enc.map(|e| {
        let grads = g.backward(e);
        b.grads(&g, &grads, Group::ContentEncoder)
    });
    let generator = gen.map(|o| {
        let grads = g.backward(o);
        Phase::Generator.groups(params).into_iter().map(|grp| (grp, b.grads(&g, &grads, grp))).collect()
    });
    let fakes = terms.fakes.map(|f| {
        [f.x_ss, f.x_ts, f.x_st, f.x_tt, f.x_pg].map(|v| g.value(v).clone())
    });
    Ok(ForwardPass { encoder, generator, fakes })
}

fn apply(
    state: &mut TrainState,
    cfg: &TrainConfig,
    phase: Phase,
    mut grads: BTreeMap<Group, ParamGroup<f32>>,
    report: &mut LossReport,
) -> Result<()> {
    let norm = {
        let mut refs: Vec<&mut ParamGroup<f32>> = grads.values_mut().collect();
        clip_grad_norm(&mut refs, cfg.clip_norm)
    };
    if !norm.is_finite() {
        return Err(Error::NonFinite { term: format!("{} gradient", phase.name()), step: state.step });
    }
    if norm > cfg.clip_norm {
        log::debug!("step {}: clipped {} gradient norm {norm:.3}", state.step, phase.name());
        report.clipped.push(phase.name().to_string());
    }
    for (group, g) in &grads {
        let opt = state.optimizers.get_mut(&(phase, *group)).expect("optimizer for every phase group");
        opt.update(state.params.get_mut(*group), g);
    }
    Ok(())
}

fn discriminator_pass(
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    bt: &BatchTensors<f32>,
    fakes: &[Tensor<f32>; 5],
    report: &mut LossReport,
    step: u64,
) -> Result<Option<BTreeMap<Group, ParamGroup<f32>>>> {
    let ab = &cfg.ablation;
    let mut active = Vec::new();
    if ab.use_domain_adv {
        active.extend([Group::SourceDiscriminator, Group::TargetDiscriminator]);
    }
    if ab.use_pose {
        let (s, t) = graph::pose_groups(params);
        active.push(s);
        if t != s {
            active.push(t);
        }
    }
    if active.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let b = Bindings::new(&mut g, params, |grp| active.contains(&grp));
    let x = Inputs::new(&mut g, bt);
    let [x_ss, x_ts, x_st, x_tt, x_pg] = fakes.clone().map(|t| g.constant(t));
    let f = Fakes { x_ss, x_ts, x_st, x_tt, x_pg };
    let terms = adversarial_terms(&mut g, &b, params, &cfg.net, cfg, x, f);
    let obj = graph::discriminator_objective(&mut g, cfg, &terms).expect("an adversarial term is active");
    if report.discriminator_total.is_none() {
        record_adversarial(&g, &terms, report);
        report.discriminator_total = Some(value(&g, obj));
        check_finite(report, step)?;
    }
    if !value(&g, obj).is_finite() {
        return Err(Error::NonFinite { term: "discriminator_total".into(), step });
    }
    let grads = g.backward(obj);
    Ok(Some(active.into_iter().map(|grp| (grp, b.grads(&g, &grads, grp))).collect()))
}

/// One training iteration. See [`train_step_observed`].
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, data: &Dataset) -> Result<LossReport> {
    train_step_observed(state, cfg, data, &mut |_, _| {})
}

/// One training iteration; `observe` sees the parameters after each phase.
///
/// The encoder phase steps `E_C` on `L_MMD + lambda_tri * L_tri`. The
/// generator phase steps `E_C`, `E_P`, `G_S` and `G_T` on the generator
/// objective; its first loop reuses the gradients of the step's single forward
/// pass, taken before the encoder update. The discriminator phase steps `D_S`,
/// `D_T` and `D_P` against the images generated in that forward pass.
pub fn train_step_observed(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    observe: &mut dyn FnMut(Phase, &ModelParams<f32>),
) -> Result<LossReport> {
    let step = state.step;
    let batch = sample_batch(data, cfg, &mut state.rng);
    let bt = BatchTensors::<f32>::gather(data, &batch)?;
    let kernel = kernel_for(state, cfg, &bt)?;
    let mut report = LossReport { step, ..Default::default() };
    let ab = &cfg.ablation;

    let mut fakes = None;
    let mut gen_grads = None;
    if ab.encoder_active() || ab.generator_active() {
        let pass = forward_pass(&state.params, cfg, &bt, kernel.as_ref(), &mut report, step)?;
        if let Some(gr) = pass.encoder {
            apply(state, cfg, Phase::Encoder, BTreeMap::from([(Group::ContentEncoder, gr)]), &mut report)?;
        }
        gen_grads = pass.generator;
        fakes = pass.fakes;
    }
    observe(Phase::Encoder, &state.params);

    if let Some(first) = gen_grads {
        apply(state, cfg, Phase::Generator, first, &mut report)?;
        for _ in 1..cfg.generator_loops {
            let mut scratch = LossReport { step, ..Default::default() };
            let pass = forward_pass(&state.params, cfg, &bt, kernel.as_ref(), &mut scratch, step)?;
            if let Some(gr) = pass.generator {
                apply(state, cfg, Phase::Generator, gr, &mut report)?;
            }
        }
    }
    observe(Phase::Generator, &state.params);

    if let Some(f) = &fakes {
        for _ in 0..cfg.discriminator_loops {
            match discriminator_pass(&state.params, cfg, &bt, f, &mut report, step)? {
                Some(gr) => apply(state, cfg, Phase::Discriminator, gr, &mut report)?,
                None => break,
            }
        }
    }
    observe(Phase::Discriminator, &state.params);

    state.step += 1;
    Ok(report)
}

/// Final state and per-step reports of a [`train`] call.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<LossReport>,
}

/// Runs iterations until `cfg.iterations`, starting from `resume` or a fresh
/// initialisation. Checkpoints go to `sink` every `checkpoint_every` steps
/// and once at the end.
pub fn train(cfg: &TrainConfig, data: &Dataset, resume: Option<TrainState>, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let mut state = match resume {
        Some(s) => {
            s.check_compatible(cfg)?;
            ensure!(
                s.step <= cfg.iterations,
                "checkpoint is at step {} beyond the configured {} iterations",
                s.step,
                cfg.iterations
            );
            s
        }
        None => TrainState::init(cfg)?,
    };
    sink.start(&state, cfg, data)?;
    let mut history = Vec::with_capacity((cfg.iterations - state.step) as usize);
    while state.step < cfg.iterations {
        let report = train_step(&mut state, cfg, data)?;
        if state.step % 100 == 0 {
            log::info!("step {} {}", state.step, report.to_json_line());
        }
        sink.step(&state, cfg, data, &report)?;
        history.push(report);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.iterations {
            sink.checkpoint(&state, cfg)?;
        }
    }
    sink.checkpoint(&state, cfg)?;
    Ok(TrainOutcome { state, history })
}

#[cfg(test)]
mod tests;
