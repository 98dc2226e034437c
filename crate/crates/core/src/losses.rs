//! Loss terms.
//!
//! The `*_var` functions append a term to an autodiff graph and are what the
//! trainer uses. The plain functions wrap them for `f64` tensors with input
//! validation.

use autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Floor applied to `ln` so a saturated discriminator cannot produce `-inf`.
pub const LOG_FLOOR: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// V-statistic; includes the diagonal kernel terms and is never negative.
    #[default]
    Biased,
    /// U-statistic; drops the diagonal terms.
    Unbiased,
}

/// A mixture of Gaussian kernels `exp(-|x - y|^2 / (2 s^2))` over the given
/// bandwidths `s`, averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
    pub estimator: Estimator,
}

/// Multipliers applied to the median bandwidth.
pub const BANDWIDTH_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>, estimator: Estimator) -> Result<Self> {
        let k = Self { bandwidths, estimator };
        k.validate()?;
        Ok(k)
    }

    /// Five bandwidths spread around `sigma`.
    pub fn around(sigma: f64, estimator: Estimator) -> Result<Self> {
        Self::new(BANDWIDTH_SCALES.iter().map(|s| s * sigma).collect(), estimator)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.bandwidths.is_empty(), "kernel needs at least one bandwidth");
        ensure!(
            self.bandwidths.iter().all(|b| b.is_finite() && *b > 0.0),
            "kernel bandwidths must be positive and finite, got {:?}",
            self.bandwidths
        );
        Ok(())
    }
}

/// Median of the pairwise Euclidean distances within the pooled rows of `a`
/// and `b`. Falls back to 1 when every distance is zero.
pub fn median_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ensure!(a.shape().len() == 2 && b.shape().len() == 2, "features must be [N, d]");
    ensure!(a.shape()[1] == b.shape()[1], "feature dimensions differ: {:?} vs {:?}", a.shape(), b.shape());
    let d = a.shape()[1];
    let rows: Vec<&[T]> = a.data().chunks(d.max(1)).chain(b.data().chunks(d.max(1))).collect();
    ensure!(rows.len() >= 2, "median heuristic needs at least two feature vectors");
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s: f64 = rows[i].iter().zip(rows[j]).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
            dists.push(s.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let med = if n % 2 == 1 { dists[n / 2] } else { 0.5 * (dists[n / 2 - 1] + dists[n / 2]) };
    Ok(if med > 0.0 && med.is_finite() { med } else { 1.0 })
}

fn kernel_mean<T: Scalar>(g: &mut Graph<T>, sq: Var, kernel: &KernelSpec) -> Var {
    let mut acc: Option<Var> = None;
    for &bw in &kernel.bandwidths {
        let s = g.scale(sq, T::lit(-1.0 / (2.0 * bw * bw)));
        let k = g.exp(s);
        acc = Some(match acc {
            Some(a) => g.add(a, k),
            None => k,
        });
    }
    let k = acc.expect("validated non-empty");
    g.scale(k, T::lit(1.0 / kernel.bandwidths.len() as f64))
}

fn block_mean<T: Scalar>(g: &mut Graph<T>, k: Var, unbiased_diag: bool) -> Var {
    let n = g.shape(k)[0];
    if unbiased_diag {
        // Diagonal distances are exactly zero, so every kernel there is 1.
        let s = g.sum(k);
        let s = g.add_scalar(s, T::lit(-(n as f64)));
        g.scale(s, T::lit(1.0 / (n * (n - 1)) as f64))
    } else {
        g.mean(k)
    }
}

/// Squared MMD between the rows of `fs` `[n_s, d]` and `ft` `[n_t, d]`.
pub fn mmd_var<T: Scalar>(g: &mut Graph<T>, fs: Var, ft: Var, kernel: &KernelSpec) -> Var {
    let unbiased = kernel.estimator == Estimator::Unbiased;
    let dss = g.pairwise_sq_dist(fs, fs);
    let dtt = g.pairwise_sq_dist(ft, ft);
    let dst = g.pairwise_sq_dist(fs, ft);
    let kss = kernel_mean(g, dss, kernel);
    let ktt = kernel_mean(g, dtt, kernel);
    let kst = kernel_mean(g, dst, kernel);
    let a = block_mean(g, kss, unbiased);
    let b = block_mean(g, ktt, unbiased);
    let c = g.mean(kst);
    let c = g.scale(c, T::lit(-2.0));
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// Mean over rows of `max(0, m + |v - v_pos| - |v - v_neg|)`.
pub fn triplet_var<T: Scalar>(g: &mut Graph<T>, v: Var, v_pos: Var, v_neg: Var, margin: f64) -> Var {
    let dp = g.sub(v, v_pos);
    let dp = g.row_norm(dp);
    let dn = g.sub(v, v_neg);
    let dn = g.row_norm(dn);
    let gap = g.sub(dp, dn);
    let gap = g.add_scalar(gap, T::lit(margin));
    let h = g.relu(gap);
    g.mean(h)
}

/// Mean absolute difference.
pub fn l1_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

fn mean_log<T: Scalar>(g: &mut Graph<T>, p: Var) -> Var {
    let l = g.ln_floor(p, T::lit(LOG_FLOOR));
    g.mean(l)
}

fn mean_log_one_minus<T: Scalar>(g: &mut Graph<T>, p: Var) -> Var {
    let q = g.rsub_scalar(T::one(), p);
    mean_log(g, q)
}

fn sum_vars<T: Scalar>(g: &mut Graph<T>, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// The two sides of an adversarial loss.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialVars {
    /// The log-likelihood the discriminator maximises.
    pub d_objective: Var,
    /// Non-saturating generator loss, minimised by the generator.
    pub g_objective: Var,
}

/// The parts of an adversarial loss that depend on generated images, for a
/// pass that never scores real ones.
#[derive(Clone, Copy, Debug)]
pub struct FakeVars {
    /// Sum over fake batches of `mean log(1 - D(fake))`.
    pub likelihood: Var,
    /// Non-saturating generator loss `-sum mean log D(fake)`.
    pub g_objective: Var,
}

/// Fake-side terms from per-sample scores of each generated batch.
pub fn fake_adversarial_var<T: Scalar>(g: &mut Graph<T>, scores: &[Var]) -> FakeVars {
    let lik: Vec<Var> = scores.iter().map(|&s| mean_log_one_minus(g, s)).collect();
    let likelihood = sum_vars(g, &lik);
    let fool: Vec<Var> = scores.iter().map(|&s| mean_log(g, s)).collect();
    let fool = sum_vars(g, &fool);
    let g_objective = g.scale(fool, T::lit(-1.0));
    FakeVars { likelihood, g_objective }
}

/// Domain adversarial terms from discriminator scores on real, reconstructed
/// and cross-domain translated images.
pub fn domain_adversarial_var<T: Scalar>(g: &mut Graph<T>, real: Var, recon: Var, translated: Var) -> AdversarialVars {
    let a = mean_log(g, real);
    let b = mean_log_one_minus(g, recon);
    let c = mean_log_one_minus(g, translated);
    let d_objective = sum_vars(g, &[a, b, c]);
    let r = mean_log(g, recon);
    let t = mean_log(g, translated);
    let s = g.add(r, t);
    let g_objective = g.scale(s, T::lit(-1.0));
    AdversarialVars { d_objective, g_objective }
}

/// Averages `[N, 1, h, w]` confidence maps to `[N, 1]` per-sample scores.
pub fn map_scores<T: Scalar>(g: &mut Graph<T>, map: Var) -> Var {
    g.mean_spatial(map)
}

/// Pose-discriminator confidence maps for the source side.
#[derive(Clone, Copy, Debug)]
pub struct SourcePoseMaps {
    /// `D_P(p, x)`.
    pub real: Var,
    /// `D_P(p, x_ss)`.
    pub recon: Var,
    /// `D_P(p', x)`: a real image under its partner's pose.
    pub mismatched: Var,
    /// `D_P(p, x_pg)`, where `x_pg` is generated from the partner's content.
    pub pose_guided: Var,
}

/// Pose-discriminator confidence maps for the target side.
#[derive(Clone, Copy, Debug)]
pub struct TargetPoseMaps {
    /// `D_P(p_t, x_t)`.
    pub real: Var,
    /// `D_P(p_t, x_tt)`.
    pub recon: Var,
}

/// Source pose adversarial terms. Maps are averaged per sample first.
pub fn pose_adversarial_source_var<T: Scalar>(g: &mut Graph<T>, maps: SourcePoseMaps) -> AdversarialVars {
    let real = map_scores(g, maps.real);
    let recon = map_scores(g, maps.recon);
    let mis = map_scores(g, maps.mismatched);
    let pg = map_scores(g, maps.pose_guided);
    let a = mean_log(g, real);
    let b = mean_log_one_minus(g, recon);
    let c = mean_log_one_minus(g, mis);
    let d = mean_log_one_minus(g, pg);
    let d_objective = sum_vars(g, &[a, b, c, d]);
    let r = mean_log(g, recon);
    let p = mean_log(g, pg);
    let s = g.add(r, p);
    let g_objective = g.scale(s, T::lit(-1.0));
    AdversarialVars { d_objective, g_objective }
}

/// Target pose adversarial terms.
pub fn pose_adversarial_target_var<T: Scalar>(g: &mut Graph<T>, maps: TargetPoseMaps) -> AdversarialVars {
    let real = map_scores(g, maps.real);
    let recon = map_scores(g, maps.recon);
    let a = mean_log(g, real);
    let b = mean_log_one_minus(g, recon);
    let d_objective = g.add(a, b);
    let r = mean_log(g, recon);
    let g_objective = g.scale(r, T::lit(-1.0));
    AdversarialVars { d_objective, g_objective }
}

// Validated f64 front ends.

fn check_features(name: &str, t: &Tensor<f64>) -> Result<()> {
    ensure!(t.shape().len() == 2, "{name} must be [N, d], got {:?}", t.shape());
    ensure!(t.shape()[0] >= 1, "{name} is an empty batch");
    Ok(())
}

fn eval<F>(inputs: &[&Tensor<f64>], f: F) -> f64
where
    F: FnOnce(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Squared maximum mean discrepancy between two feature batches `[n, d]`.
pub fn mmd_loss(fs: &Tensor<f64>, ft: &Tensor<f64>, kernel: &KernelSpec) -> Result<f64> {
    kernel.validate()?;
    check_features("source features", fs)?;
    check_features("target features", ft)?;
    ensure!(fs.shape()[1] == ft.shape()[1], "feature dimensions differ: {:?} vs {:?}", fs.shape(), ft.shape());
    if kernel.estimator == Estimator::Unbiased {
        ensure!(
            fs.shape()[0] >= 2 && ft.shape()[0] >= 2,
            "the unbiased estimator needs at least two samples per batch"
        );
    }
    Ok(eval(&[fs, ft], |g, v| mmd_var(g, v[0], v[1], kernel)))
}

/// Batch triplet loss over rows of `[N, d]` tensors; use `N = 1` for a
/// single triplet.
pub fn triplet_loss(v: &Tensor<f64>, v_pos: &Tensor<f64>, v_neg: &Tensor<f64>, margin: f64) -> Result<f64> {
    ensure!(margin > 0.0 && margin.is_finite(), "margin must be positive, got {margin}");
    check_features("anchor", v)?;
    ensure!(
        v.shape() == v_pos.shape() && v.shape() == v_neg.shape(),
        "triplet shapes differ: {:?}, {:?}, {:?}",
        v.shape(),
        v_pos.shape(),
        v_neg.shape()
    );
    Ok(eval(&[v, v_pos, v_neg], |g, x| triplet_var(g, x[0], x[1], x[2], margin)))
}

fn check_same(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    ensure!(a.numel() > 0, "empty image tensor");
    ensure!(a.shape() == b.shape(), "image shapes differ: {:?} vs {:?}", a.shape(), b.shape());
    Ok(())
}

/// `mean|x_ss - x_s| + mean|x_pg - x_ref|`.
pub fn reconstruction_loss_source(
    x_ss: &Tensor<f64>,
    x_s: &Tensor<f64>,
    x_pose_guided: &Tensor<f64>,
    x_s_ref: &Tensor<f64>,
) -> Result<f64> {
    check_same(x_ss, x_s)?;
    check_same(x_pose_guided, x_s_ref)?;
    check_same(x_ss, x_pose_guided)?;
    Ok(eval(&[x_ss, x_s, x_pose_guided, x_s_ref], |g, v| {
        let a = l1_var(g, v[0], v[1]);
        let b = l1_var(g, v[2], v[3]);
        g.add(a, b)
    }))
}

/// `mean|x_tt - x_t|`.
pub fn reconstruction_loss_target(x_tt: &Tensor<f64>, x_t: &Tensor<f64>) -> Result<f64> {
    check_same(x_tt, x_t)?;
    Ok(eval(&[x_tt, x_t], |g, v| l1_var(g, v[0], v[1])))
}

/// Values of both adversarial objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub d_objective: f64,
    pub g_objective: f64,
}

fn scores(name: &str, s: &[f64]) -> Result<Tensor<f64>> {
    ensure!(!s.is_empty(), "{name} is an empty batch");
    ensure!(s.iter().all(|p| (0.0..=1.0).contains(p)), "{name} scores must lie in [0, 1]");
    Ok(Tensor::from_vec(vec![s.len(), 1], s.to_vec())?)
}

fn maps(name: &str, m: &Tensor<f64>) -> Result<()> {
    ensure!(
        m.shape().len() == 4 && m.shape()[1] == 1 && m.numel() > 0,
        "{name} must be a non-empty [N, 1, h, w] map, got {:?}",
        m.shape()
    );
    ensure!(m.data().iter().all(|p| (0.0..=1.0).contains(p)), "{name} confidences must lie in [0, 1]");
    Ok(())
}

fn objectives(g: &Graph<f64>, a: AdversarialVars) -> Objectives {
    Objectives { d_objective: g.value(a.d_objective).item(), g_objective: g.value(a.g_objective).item() }
}

/// Domain adversarial objectives from discriminator scores.
pub fn domain_adversarial_loss(real: &[f64], recon: &[f64], translated: &[f64]) -> Result<Objectives> {
    let (r, c, t) = (scores("real", real)?, scores("recon", recon)?, scores("translated", translated)?);
    let mut g = Graph::new();
    let (r, c, t) = (g.constant(r), g.constant(c), g.constant(t));
    let a = domain_adversarial_var(&mut g, r, c, t);
    Ok(objectives(&g, a))
}

/// Source-side pose confidence maps, each `[N, 1, h, w]`.
#[derive(Clone, Debug)]
pub struct SourcePoseTuple {
    pub real: Tensor<f64>,
    pub recon: Tensor<f64>,
    /// Absent when no same-identity partner pose is available.
    pub mismatched: Option<Tensor<f64>>,
    pub pose_guided: Option<Tensor<f64>>,
}

#[derive(Clone, Debug)]
pub struct TargetPoseTuple {
    pub real: Tensor<f64>,
    pub recon: Tensor<f64>,
}

/// Pose adversarial objectives, summed over the source and target sides.
pub fn pose_adversarial_loss(source: &SourcePoseTuple, target: &TargetPoseTuple) -> Result<Objectives> {
    let (Some(mis), Some(pg)) = (&source.mismatched, &source.pose_guided) else {
        return Err(crate::Error::InvalidArgument(
            "the source tuple needs the partner-pose terms (same-identity pair)".into(),
        ));
    };
    for (name, m) in [
        ("source real", &source.real),
        ("source recon", &source.recon),
        ("source mismatched", mis),
        ("source pose-guided", pg),
        ("target real", &target.real),
        ("target recon", &target.recon),
    ] {
        maps(name, m)?;
    }
    let mut g = Graph::new();
    let s = SourcePoseMaps {
        real: g.constant(source.real.clone()),
        recon: g.constant(source.recon.clone()),
        mismatched: g.constant(mis.clone()),
        pose_guided: g.constant(pg.clone()),
    };
    let t = TargetPoseMaps { real: g.constant(target.real.clone()), recon: g.constant(target.recon.clone()) };
    let a = pose_adversarial_source_var(&mut g, s);
    let b = pose_adversarial_target_var(&mut g, t);
    let (a, b) = (objectives(&g, a), objectives(&g, b));
    Ok(Objectives { d_objective: a.d_objective + b.d_objective, g_objective: a.g_objective + b.g_objective })
}

/// Every loss value of one training step, plus the per-phase totals.
///
/// Terms that are switched off are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose_t: Option<f64>,
    /// Weighted objective of the encoder phase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_total: Option<f64>,
    /// Weighted objective of the generator phase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_total: Option<f64>,
    /// Weighted objective of the discriminator phase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator_total: Option<f64>,
    /// Phases whose gradient norm was clipped this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clipped: Vec<String>,
}

impl LossReport {
    /// `(name, value)` for every present term, in a fixed order.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        [
            ("mmd", self.mmd),
            ("triplet", self.triplet),
            ("rec_s", self.rec_s),
            ("rec_t", self.rec_t),
            ("domain_s", self.domain_s),
            ("domain_t", self.domain_t),
            ("pose_s", self.pose_s),
            ("pose_t", self.pose_t),
            ("encoder_total", self.encoder_total),
            ("generator_total", self.generator_total),
            ("discriminator_total", self.discriminator_total),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    /// The first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}
