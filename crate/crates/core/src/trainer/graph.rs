//! Builds every loss term of one training step on an autodiff graph.

use std::collections::BTreeMap;

use autograd::{Bound, Graph, Scalar, Tensor, Var};

use super::{Ablation, AdversarialForm, TrainConfig};
use crate::datagen::{Dataset, Domain, DomainData, PersonImage, PoseMap};
use crate::losses::{
    domain_adversarial_var, fake_adversarial_var, l1_var, map_scores, mmd_var, pose_adversarial_source_var,
    pose_adversarial_target_var, triplet_var, median_distance, AdversarialVars, Estimator, FakeVars, KernelSpec, SourcePoseMaps, TargetPoseMaps,
};
use crate::networks::{forward, image_batch, pose_batch, Group, ModelParams, NetConfig};
use crate::Result;

/// Dataset indices of one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    /// `(x, x')` source pairs; both images share an identity.
    pub source_pairs: Vec<(usize, usize)>,
    pub target: Vec<usize>,
}

/// Stacked input tensors of one batch.
#[derive(Clone, Debug)]
pub struct BatchTensors<T> {
    pub xs: Tensor<T>,
    pub xs2: Tensor<T>,
    pub ps: Tensor<T>,
    pub ps2: Tensor<T>,
    pub xt: Tensor<T>,
    pub pt: Tensor<T>,
    /// Identity of each source pair.
    pub ids: Vec<u32>,
}

fn imgs<'a>(d: &'a DomainData, idx: &[usize]) -> Vec<&'a PersonImage> {
    idx.iter().map(|&i| d.image(i)).collect()
}

fn maps<'a>(d: &'a DomainData, idx: &[usize]) -> Vec<&'a PoseMap> {
    idx.iter().map(|&i| d.pose_map(i)).collect()
}

impl<T: Scalar> BatchTensors<T> {
    pub fn gather(data: &Dataset, b: &BatchIndices) -> Result<Self> {
        let (h, w) = (data.height(), data.width());
        let s = &data.source;
        let t = &data.target;
        let first: Vec<usize> = b.source_pairs.iter().map(|p| p.0).collect();
        let second: Vec<usize> = b.source_pairs.iter().map(|p| p.1).collect();
        Ok(Self {
            xs: image_batch(&imgs(s, &first), h, w)?,
            xs2: image_batch(&imgs(s, &second), h, w)?,
            ps: pose_batch(&maps(s, &first), h, w)?,
            ps2: pose_batch(&maps(s, &second), h, w)?,
            xt: image_batch(&imgs(t, &b.target), h, w)?,
            pt: pose_batch(&maps(t, &b.target), h, w)?,
            ids: first.iter().map(|&i| s.identity(i)).collect(),
        })
    }
}

/// Graph constants for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Inputs {
    pub xs: Var,
    pub xs2: Var,
    pub ps: Var,
    pub ps2: Var,
    pub xt: Var,
    pub pt: Var,
}

impl Inputs {
    pub fn new<T: Scalar>(g: &mut Graph<T>, b: &BatchTensors<T>) -> Self {
        Self {
            xs: g.constant(b.xs.clone()),
            xs2: g.constant(b.xs2.clone()),
            ps: g.constant(b.ps.clone()),
            ps2: g.constant(b.ps2.clone()),
            xt: g.constant(b.xt.clone()),
            pt: g.constant(b.pt.clone()),
        }
    }
}

/// Bound parameter groups; which are leaves is chosen at bind time.
pub struct Bindings {
    groups: BTreeMap<Group, Bound>,
}

impl Bindings {
    pub fn new<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>, trainable: impl Fn(Group) -> bool) -> Self {
        let groups = params.groups().map(|(k, p)| (k, p.bind(g, trainable(k)))).collect();
        Self { groups }
    }

    pub fn get(&self, group: Group) -> &Bound {
        &self.groups[&group]
    }

    pub fn grads<T: Scalar>(&self, g: &Graph<T>, grads: &autograd::Gradients<T>, group: Group) -> autograd::ParamGroup<T> {
        self.groups[&group].grads(g, grads)
    }
}

/// Generated images of one step.
#[derive(Clone, Copy, Debug)]
pub struct Fakes {
    pub x_ss: Var,
    pub x_ts: Var,
    pub x_st: Var,
    pub x_tt: Var,
    /// `G_S(v_p of x, v_c of x')`.
    pub x_pg: Var,
}

/// Loss terms of the encoder and generator phases. Disabled terms are `None`.
///
/// The adversarial terms only score generated images: real images carry no
/// gradient to the encoders or generators, and the discriminator pass
/// evaluates the full losses.
#[derive(Clone, Copy, Debug, Default)]
pub struct Terms {
    pub mmd: Option<Var>,
    pub triplet: Option<Var>,
    pub rec_s: Option<Var>,
    pub rec_t: Option<Var>,
    pub domain_s: Option<FakeVars>,
    pub domain_t: Option<FakeVars>,
    pub pose_s: Option<FakeVars>,
    pub pose_t: Option<FakeVars>,
    pub fakes: Option<Fakes>,
    /// Content features of `x`, `x'` and the target batch.
    pub features: Option<(Var, Var, Var)>,
}

/// Full adversarial losses of the discriminator phase.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiscTerms {
    pub domain_s: Option<AdversarialVars>,
    pub domain_t: Option<AdversarialVars>,
    pub pose_s: Option<AdversarialVars>,
    pub pose_t: Option<AdversarialVars>,
}

impl Ablation {
    pub fn encoder_active(&self) -> bool {
        self.use_mmd || self.use_triplet
    }

    pub fn generator_active(&self) -> bool {
        self.use_rec || self.use_pose || self.use_domain_adv
    }
}

/// For each anchor, the partner image `x'` of another identity that is
/// closest to it in content space.
pub fn hardest_negatives<T: Scalar>(anchors: &Tensor<T>, candidates: &Tensor<T>, ids: &[u32]) -> Vec<usize> {
    let d = anchors.shape()[1];
    let a: Vec<&[T]> = anchors.data().chunks(d).collect();
    let c: Vec<&[T]> = candidates.data().chunks(d).collect();
    (0..a.len())
        .map(|i| {
            let mut best = None;
            for j in 0..c.len() {
                if ids[j] == ids[i] {
                    continue;
                }
                let dist: f64 = a[i].iter().zip(c[j]).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
                // strict < keeps the lowest index on ties
                if best.is_none_or(|(bd, _)| dist < bd) {
                    best = Some((dist, j));
                }
            }
            best.map(|(_, j)| j).expect("batch holds at least two identities")
        })
        .collect()
}

fn gather_rows<T: Scalar>(g: &mut Graph<T>, x: Var, rows: &[usize]) -> Var {
    let parts: Vec<Var> = rows.iter().map(|&r| g.narrow(x, r, 1)).collect();
    g.cat_rows(&parts)
}

/// `D_S` or `D_T` scores on real, reconstructed and translated images.
pub fn domain_terms<T: Scalar>(g: &mut Graph<T>, p: &Bound, net: &NetConfig, real: Var, recon: Var, trans: Var) -> AdversarialVars {
    let n = [g.shape(real)[0], g.shape(recon)[0], g.shape(trans)[0]];
    let x = g.cat_rows(&[real, recon, trans]);
    let s = forward::domain_discriminator(g, p, net, x);
    let a = g.narrow(s, 0, n[0]);
    let b = g.narrow(s, n[0], n[1]);
    let c = g.narrow(s, n[0] + n[1], n[2]);
    domain_adversarial_var(g, a, b, c)
}

/// `D_S` or `D_T` scores on the reconstructed and translated images only.
pub fn domain_fake_terms<T: Scalar>(g: &mut Graph<T>, p: &Bound, net: &NetConfig, recon: Var, trans: Var) -> FakeVars {
    let n = [g.shape(recon)[0], g.shape(trans)[0]];
    let x = g.cat_rows(&[recon, trans]);
    let s = forward::domain_discriminator(g, p, net, x);
    let a = g.narrow(s, 0, n[0]);
    let b = g.narrow(s, n[0], n[1]);
    fake_adversarial_var(g, &[a, b])
}

#[allow(clippy::too_many_arguments)]
pub fn pose_source_terms<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    net: &NetConfig,
    xs: Var,
    ps: Var,
    ps2: Var,
    x_ss: Var,
    x_pg: Var,
) -> AdversarialVars {
    let n = g.shape(xs)[0];
    let m = forward::pose_discriminator_shared(g, p, net, &[xs, x_ss, xs, x_pg], &[ps, ps2], &[0, 0, 1, 0]);
    let maps = SourcePoseMaps {
        real: g.narrow(m, 0, n),
        recon: g.narrow(m, n, n),
        mismatched: g.narrow(m, 2 * n, n),
        pose_guided: g.narrow(m, 3 * n, n),
    };
    pose_adversarial_source_var(g, maps)
}

/// `D_P` on `(p, x_ss)` and `(p, x_pg)`.
pub fn pose_source_fake_terms<T: Scalar>(g: &mut Graph<T>, p: &Bound, net: &NetConfig, ps: Var, x_ss: Var, x_pg: Var) -> FakeVars {
    let n = g.shape(x_ss)[0];
    let m = forward::pose_discriminator_shared(g, p, net, &[x_ss, x_pg], &[ps], &[0, 0]);
    let recon = g.narrow(m, 0, n);
    let pg = g.narrow(m, n, n);
    let scores = [map_scores(g, recon), map_scores(g, pg)];
    fake_adversarial_var(g, &scores)
}

pub fn pose_target_terms<T: Scalar>(g: &mut Graph<T>, p: &Bound, net: &NetConfig, xt: Var, pt: Var, x_tt: Var) -> AdversarialVars {
    let n = g.shape(xt)[0];
    let m = forward::pose_discriminator_shared(g, p, net, &[xt, x_tt], &[pt], &[0, 0]);
    let maps = TargetPoseMaps { real: g.narrow(m, 0, n), recon: g.narrow(m, n, n) };
    pose_adversarial_target_var(g, maps)
}

/// `D_P` on `(p_t, x_tt)`.
pub fn pose_target_fake_terms<T: Scalar>(g: &mut Graph<T>, p: &Bound, net: &NetConfig, pt: Var, x_tt: Var) -> FakeVars {
    let m = forward::pose_discriminator(g, p, net, x_tt, pt);
    let scores = map_scores(g, m);
    fake_adversarial_var(g, &[scores])
}

/// The pose-discriminator group used by each domain.
pub fn pose_groups<T: Scalar>(params: &ModelParams<T>) -> (Group, Group) {
    (params.pose_disc_group(Domain::Source), params.pose_disc_group(Domain::Target))
}

/// The MMD kernel of a step: fixed, or centred on the median distance of
/// the step's own (detached) features.
#[derive(Clone, Debug, PartialEq)]
pub enum MmdKernel {
    Fixed(KernelSpec),
    PerBatch(Estimator),
}

impl MmdKernel {
    fn resolve<T: Scalar>(&self, fs: &Tensor<T>, ft: &Tensor<T>) -> KernelSpec {
        match self {
            MmdKernel::Fixed(k) => k.clone(),
            MmdKernel::PerBatch(e) => median_distance(fs, ft)
                .and_then(|s| KernelSpec::around(s, *e))
                .expect("batch features are finite [N, d] rows"),
        }
    }
}

/// Builds every enabled term: content features, encoder losses, the five
/// generated images, reconstruction losses and both adversarial losses.
///
/// `kernel` is required when MMD is enabled.
#[allow(clippy::too_many_arguments)]
pub fn build_terms<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    params: &ModelParams<T>,
    net: &NetConfig,
    cfg: &TrainConfig,
    x: Inputs,
    ids: &[u32],
    kernel: Option<&MmdKernel>,
) -> Terms {
    let ab = &cfg.ablation;
    let mut t = Terms::default();
    if !ab.encoder_active() && !ab.generator_active() {
        return t;
    }
    let n_s = g.shape(x.xs)[0];
    let n_t = g.shape(x.xt)[0];
    let all = g.cat_rows(&[x.xs, x.xs2, x.xt]);
    let vc = forward::content_encoder(g, b.get(Group::ContentEncoder), net, all);
    let vc_s = g.narrow(vc, 0, n_s);
    let vc_s2 = g.narrow(vc, n_s, n_s);
    let vc_t = g.narrow(vc, 2 * n_s, n_t);
    t.features = Some((vc_s, vc_s2, vc_t));

    if ab.use_mmd {
        let k = kernel.expect("MMD needs a kernel").resolve(g.value(vc_s), g.value(vc_t));
        t.mmd = Some(mmd_var(g, vc_s, vc_t, &k));
    }
    if ab.use_triplet {
        let neg = hardest_negatives(g.value(vc_s), g.value(vc_s2), ids);
        let v_neg = gather_rows(g, vc_s2, &neg);
        t.triplet = Some(triplet_var(g, vc_s, vc_s2, v_neg, cfg.margin));
    }
    if !ab.generator_active() {
        return t;
    }

    let poses = g.cat_rows(&[x.ps, x.pt]);
    let vp = forward::pose_encoder(g, b.get(Group::PoseEncoder), net, poses);
    let vp_s = g.narrow(vp, 0, n_s);
    let vp_t = g.narrow(vp, n_s, n_t);

    let p_in = g.cat_rows(&[vp_s, vp_t, vp_s]);
    let c_in = g.cat_rows(&[vc_s, vc_t, vc_s2]);
    let out_s = forward::generator(g, b.get(Group::SourceGenerator), net, p_in, c_in);
    let x_ss = g.narrow(out_s, 0, n_s);
    let x_ts = g.narrow(out_s, n_s, n_t);
    let x_pg = g.narrow(out_s, n_s + n_t, n_s);
    let p_in = g.cat_rows(&[vp_s, vp_t]);
    let c_in = g.cat_rows(&[vc_s, vc_t]);
    let out_t = forward::generator(g, b.get(Group::TargetGenerator), net, p_in, c_in);
    let x_st = g.narrow(out_t, 0, n_s);
    let x_tt = g.narrow(out_t, n_s, n_t);
    let fakes = Fakes { x_ss, x_ts, x_st, x_tt, x_pg };
    t.fakes = Some(fakes);

    if ab.use_rec {
        let a = l1_var(g, x_ss, x.xs);
        let c = l1_var(g, x_pg, x.xs);
        t.rec_s = Some(g.add(a, c));
        t.rec_t = Some(l1_var(g, x_tt, x.xt));
    }
    let ab = &cfg.ablation;
    if ab.use_domain_adv {
        t.domain_s = Some(domain_fake_terms(g, b.get(Group::SourceDiscriminator), net, x_ss, x_ts));
        t.domain_t = Some(domain_fake_terms(g, b.get(Group::TargetDiscriminator), net, x_tt, x_st));
    }
    if ab.use_pose {
        let (ps_group, pt_group) = pose_groups(params);
        t.pose_s = Some(pose_source_fake_terms(g, b.get(ps_group), net, x.ps, x_ss, x_pg));
        t.pose_t = Some(pose_target_fake_terms(g, b.get(pt_group), net, x.pt, x_tt));
    }
    t
}

/// The full domain and pose adversarial losses for the given fakes.
pub fn adversarial_terms<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    params: &ModelParams<T>,
    net: &NetConfig,
    cfg: &TrainConfig,
    x: Inputs,
    f: Fakes,
) -> DiscTerms {
    let ab = &cfg.ablation;
    let mut t = DiscTerms::default();
    if ab.use_domain_adv {
        t.domain_s = Some(domain_terms(g, b.get(Group::SourceDiscriminator), net, x.xs, f.x_ss, f.x_ts));
        t.domain_t = Some(domain_terms(g, b.get(Group::TargetDiscriminator), net, x.xt, f.x_tt, f.x_st));
    }
    if ab.use_pose {
        let (ps_group, pt_group) = pose_groups(params);
        t.pose_s = Some(pose_source_terms(g, b.get(ps_group), net, x.xs, x.ps, x.ps2, f.x_ss, f.x_pg));
        t.pose_t = Some(pose_target_terms(g, b.get(pt_group), net, x.xt, x.pt, f.x_tt));
    }
    t
}

fn add_opt<T: Scalar>(g: &mut Graph<T>, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => g.add(a, v),
        None => v,
    })
}

/// `L_MMD + lambda_tri * L_tri`.
pub fn encoder_objective<T: Scalar>(g: &mut Graph<T>, cfg: &TrainConfig, t: &Terms) -> Option<Var> {
    let mut acc = None;
    if let Some(m) = t.mmd {
        acc = add_opt(g, acc, m);
    }
    if let Some(tr) = t.triplet {
        let w = g.scale(tr, T::lit(cfg.lambda_tri));
        acc = add_opt(g, acc, w);
    }
    acc
}

/// The joint objective of the generator phase. Under the literal form the
/// adversarial part is the negated fake-image likelihood; the real-image
/// terms it omits are constant in every generator-phase parameter.
pub fn generator_objective<T: Scalar>(g: &mut Graph<T>, cfg: &TrainConfig, t: &Terms) -> Option<Var> {
    let literal = cfg.adversarial == AdversarialForm::Literal;
    let side = |a: FakeVars| if literal { a.likelihood } else { a.g_objective };
    let sign = if literal { -1.0 } else { 1.0 };
    let mut acc = None;
    for r in [t.rec_s, t.rec_t].into_iter().flatten() {
        let w = g.scale(r, T::lit(cfg.lambda_rec));
        acc = add_opt(g, acc, w);
    }
    for d in [t.domain_s, t.domain_t].into_iter().flatten() {
        let w = g.scale(side(d), T::lit(sign));
        acc = add_opt(g, acc, w);
    }
    for p in [t.pose_s, t.pose_t].into_iter().flatten() {
        let w = g.scale(side(p), T::lit(sign * cfg.lambda_pose));
        acc = add_opt(g, acc, w);
    }
    acc
}

/// Sum of the discriminator losses: the negated log-likelihoods, or the
/// log-likelihoods themselves under the literal sign scheme.
pub fn discriminator_objective<T: Scalar>(g: &mut Graph<T>, cfg: &TrainConfig, t: &DiscTerms) -> Option<Var> {
    let sign = if cfg.adversarial == AdversarialForm::Literal { 1.0 } else { -1.0 };
    let mut acc = None;
    for a in [t.domain_s, t.domain_t, t.pose_s, t.pose_t].into_iter().flatten() {
        let w = g.scale(a.d_objective, T::lit(sign));
        acc = add_opt(g, acc, w);
    }
    acc
}
