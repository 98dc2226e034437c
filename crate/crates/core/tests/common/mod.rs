//! Checks shared by the integration tests and the acceptance suite. Each
//! returns a description of the first failure instead of panicking so the
//! acceptance runner can report it.

#![allow(dead_code)]

use autograd::{Graph, Tensor, Var};
use pdanet::datagen::{synthesize_dataset, Dataset, SynthSpec};
use pdanet::evaluator::{average_precisions, cmc, rank_gallery, RankedList};
use pdanet::losses::{mmd_loss, Estimator, KernelSpec};
use pdanet::networks::{Group, ModelParams, NetConfig};
use pdanet::trainer::graph::{adversarial_terms, build_terms, Bindings, Inputs, MmdKernel};
use pdanet::trainer::{sample_batch, BatchTensors, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<(), String>;

// ---------------------------------------------------------------------------
// gradients

/// The seven loss terms of a training step.
pub const TERMS: [&str; 7] = ["mmd", "triplet", "rec_s", "rec_t", "domain_s", "domain_t", "pose"];

/// Groups a term depends on; every other group must get a zero gradient.
pub fn upstream(term: &str) -> Vec<Group> {
    use Group::*;
    match term {
        "mmd" | "triplet" => vec![ContentEncoder],
        "rec_s" => vec![ContentEncoder, PoseEncoder, SourceGenerator],
        "rec_t" => vec![ContentEncoder, PoseEncoder, TargetGenerator],
        "domain_s" => vec![ContentEncoder, PoseEncoder, SourceGenerator, SourceDiscriminator],
        "domain_t" => vec![ContentEncoder, PoseEncoder, TargetGenerator, TargetDiscriminator],
        "pose" => vec![ContentEncoder, PoseEncoder, SourceGenerator, TargetGenerator, PoseDiscriminator],
        _ => panic!("unknown term {term}"),
    }
}

pub struct GradSetup {
    pub cfg: TrainConfig,
    pub params: ModelParams<f64>,
    pub batch: BatchTensors<f64>,
}

/// Tiny network (d = 8, h = 4, 16x8 images) on a small synthetic dataset,
/// with its first training batch.
///
/// Every parameter is jittered away from its initial value: zero biases
/// behind dead ReLUs put some units exactly on the kink, where the one-sided
/// derivatives differ.
pub fn grad_setup() -> GradSetup {
    let cfg = TrainConfig { batch_source: 3, batch_target: 3, net: NetConfig::tiny(), ..TrainConfig::default() };
    let data: Dataset = synthesize_dataset(&SynthSpec {
        identities: 4,
        images_per_identity: 3,
        height: 16,
        width: 8,
        sigma: 1.0,
        seed: 5,
        ..SynthSpec::default()
    })
    .expect("tiny dataset");
    let mut state = TrainState::init(&cfg).expect("valid config");
    let idx = sample_batch(&data, &cfg, &mut state.rng);
    let batch = BatchTensors::gather(&data, &idx).expect("batch");
    let mut params: ModelParams<f64> = state.params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let groups: Vec<Group> = params.groups().map(|(g, _)| g).collect();
    for g in groups {
        for (_, t) in params.get_mut(g).iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    GradSetup { params, cfg, batch }
}

/// Scalar objectives of `term`: the loss itself, or the discriminator and
/// generator objectives of an adversarial term.
fn objectives(g: &mut Graph<f64>, s: &GradSetup, params: &ModelParams<f64>, trainable: bool, term: &str) -> (Vec<Var>, Bindings) {
    let b = Bindings::new(g, params, |_| trainable);
    let x = Inputs::new(g, &s.batch);
    let kernel = MmdKernel::Fixed(KernelSpec::around(1.0, Estimator::Biased).unwrap());
    let t = build_terms(g, &b, params, &s.cfg.net, &s.cfg, x, &s.batch.ids, Some(&kernel));
    let adv = adversarial_terms(g, &b, params, &s.cfg.net, &s.cfg, x, t.fakes.expect("generator is on"));
    let pair = |a: Option<pdanet::losses::AdversarialVars>| {
        let a = a.expect("adversarial term is on");
        vec![a.d_objective, a.g_objective]
    };
    let vars = match term {
        "mmd" => vec![t.mmd.unwrap()],
        "triplet" => vec![t.triplet.unwrap()],
        "rec_s" => vec![t.rec_s.unwrap()],
        "rec_t" => vec![t.rec_t.unwrap()],
        "domain_s" => pair(adv.domain_s),
        "domain_t" => pair(adv.domain_t),
        "pose" => {
            let (ps, pt) = (pair(adv.pose_s), pair(adv.pose_t));
            vec![g.add(ps[0], pt[0]), g.add(ps[1], pt[1])]
        }
        _ => panic!("unknown term {term}"),
    };
    (vars, b)
}

fn values(s: &GradSetup, params: &ModelParams<f64>, term: &str) -> Vec<f64> {
    let mut g = Graph::new();
    let (vars, _) = objectives(&mut g, s, params, false, term);
    vars.iter().map(|&v| g.value(v).item()).collect()
}

pub const GRAD_RTOL: f64 = 1e-3;
const GRAD_EPS: f64 = 1e-6;
const DIRECTIONS: usize = 2;

/// One directional derivative comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub term: &'static str,
    pub objective: usize,
    pub group: Group,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-12)
    }
}

/// Compares analytic and central-difference directional derivatives of every
/// objective of `term` along random unit directions in each upstream group,
/// and checks that all other groups get exactly zero gradient.
pub fn check_term_gradients(s: &GradSetup, term: &'static str, seed: u64) -> Result<Vec<GradCheck>, String> {
    let mut g = Graph::new();
    let (vars, b) = objectives(&mut g, s, &s.params, true, term);
    let ups = upstream(term);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, &v) in vars.iter().enumerate() {
        let grads = g.backward(v);
        for (group, _) in s.params.groups() {
            let grad = b.grads(&g, &grads, group);
            let norm: f64 = grad.iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt();
            if !ups.contains(&group) {
                if norm != 0.0 {
                    return Err(format!("{term}[{k}]: {} is not upstream but has gradient norm {norm:e}", group.name()));
                }
                continue;
            }
            if norm <= 0.0 || norm.is_nan() {
                return Err(format!("{term}[{k}]: no gradient reaches {}", group.name()));
            }
            for _ in 0..DIRECTIONS {
                let mut dir = s.params.get(group).zeros_like();
                for (_, t) in dir.iter_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                }
                let len: f64 = dir.iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt();
                let analytic: f64 = dir
                    .iter()
                    .map(|(name, d)| {
                        let gr = grad.get(name).unwrap();
                        d.data().iter().zip(gr.data()).map(|(a, b)| a * b).sum::<f64>() / len
                    })
                    .sum();
                let shifted = |sign: f64| {
                    let mut p = s.params.clone();
                    for (name, t) in p.get_mut(group).iter_mut() {
                        let d = dir.get(name).unwrap();
                        t.data_mut().iter_mut().zip(d.data()).for_each(|(x, u)| *x += sign * GRAD_EPS * u / len);
                    }
                    values(s, &p, term)[k]
                };
                let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * GRAD_EPS);
                out.push(GradCheck { term, objective: k, group, analytic, numeric });
            }
        }
    }
    Ok(out)
}

/// Runs every term; returns the checks and the first failure, if any.
pub fn gradient_suite() -> (Vec<GradCheck>, Check) {
    let s = grad_setup();
    let mut all = Vec::new();
    for (i, term) in TERMS.iter().enumerate() {
        match check_term_gradients(&s, term, i as u64) {
            Ok(c) => all.extend(c),
            Err(e) => return (all, Err(e)),
        }
    }
    let verdict = match all.iter().find(|c| c.rel_error().is_nan() || c.rel_error() > GRAD_RTOL) {
        Some(c) => Err(format!(
            "{}[{}] wrt {}: analytic {:e} vs numeric {:e} (rel {:.2e})",
            c.term,
            c.objective,
            c.group.name(),
            c.analytic,
            c.numeric,
            c.rel_error()
        )),
        None => Ok(()),
    };
    (all, verdict)
}

// ---------------------------------------------------------------------------
// MMD

pub fn random_batch(rng: &mut impl Rng, n: usize, d: usize, shift: f64) -> Tensor<f64> {
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect();
    Tensor::from_vec(vec![n, d], data).unwrap()
}

pub fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].iter().copied()).collect();
    Tensor::from_vec(t.shape().to_vec(), data).unwrap()
}

fn shuffled(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Non-negativity, zero on identical batches, swap symmetry and permutation
/// invariance of the biased estimator on one random instance.
pub fn check_mmd_instance(rng: &mut impl Rng) -> Check {
    let d = rng.random_range(1..=8);
    let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=12));
    let a = random_batch(rng, n, d, 0.0);
    let shift = rng.random_range(-2.0..2.0);
    let b = random_batch(rng, m, d, shift);
    let bandwidths = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0.1..4.0)).collect();
    let k = KernelSpec::new(bandwidths, Estimator::Biased).map_err(|e| e.to_string())?;
    let v = mmd_loss(&a, &b, &k).map_err(|e| e.to_string())?;
    if v.is_nan() || v < 0.0 {
        return Err(format!("MMD {v} is negative (n={n}, m={m}, d={d})"));
    }
    let same = mmd_loss(&a, &a, &k).map_err(|e| e.to_string())?;
    if same.abs() > 1e-6 {
        return Err(format!("MMD(A, A) = {same:e}"));
    }
    let swapped = mmd_loss(&b, &a, &k).map_err(|e| e.to_string())?;
    if (swapped - v).abs() > 1e-9 * v.abs().max(1.0) {
        return Err(format!("MMD(A, B) = {v} but MMD(B, A) = {swapped}"));
    }
    let pa = permute_rows(&a, &shuffled(rng, n));
    let pb = permute_rows(&b, &shuffled(rng, m));
    let permuted = mmd_loss(&pa, &pb, &k).map_err(|e| e.to_string())?;
    if (permuted - v).abs() > 1e-9 * v.abs().max(1.0) {
        return Err(format!("MMD changed under row permutation: {v} vs {permuted}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// retrieval

#[derive(Debug)]
pub struct RetrievalInstance {
    pub queries: Tensor<f64>,
    pub gallery: Tensor<f64>,
    pub query_labels: Vec<u32>,
    pub gallery_labels: Vec<u32>,
}

/// Random features and labels; every query label occurs in the gallery.
/// Features are sometimes drawn from a small integer grid to force ties.
pub fn random_retrieval(rng: &mut impl Rng) -> RetrievalInstance {
    let d = rng.random_range(1..=6);
    let ids = rng.random_range(1..=8u32);
    let n_g = rng.random_range(ids as usize..=64);
    let n_q = rng.random_range(1..=10);
    let coarse = rng.random_bool(0.3);
    let feature = |rng: &mut dyn rand::RngCore| -> f64 {
        if coarse {
            rng.random_range(-2..=2) as f64
        } else {
            rng.sample(StandardNormal)
        }
    };
    let mut gallery_labels: Vec<u32> = (0..ids).collect();
    gallery_labels.extend((ids as usize..n_g).map(|_| rng.random_range(0..ids)));
    let perm = shuffled(rng, n_g);
    let gallery_labels: Vec<u32> = perm.iter().map(|&i| gallery_labels[i]).collect();
    let query_labels: Vec<u32> = (0..n_q).map(|_| rng.random_range(0..ids)).collect();
    let g: Vec<f64> = (0..n_g * d).map(|_| feature(rng)).collect();
    let q: Vec<f64> = (0..n_q * d).map(|_| feature(rng)).collect();
    RetrievalInstance {
        queries: Tensor::from_vec(vec![n_q, d], q).unwrap(),
        gallery: Tensor::from_vec(vec![n_g, d], g).unwrap(),
        query_labels,
        gallery_labels,
    }
}

/// Gallery order by repeated selection of the nearest remaining item.
pub fn brute_force_order(q: &[f64], gallery: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let dist = |r: &[f64]| r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut left: Vec<usize> = (0..gallery.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if dist(&gallery[left[j]]) < dist(&gallery[left[best]]) {
                best = j;
            }
        }
        let i = left.remove(best);
        out.push((i, dist(&gallery[i])));
    }
    out
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

/// Compares ranking, CMC at every k and AP against brute force, and checks
/// that CMC never decreases in k.
pub fn check_retrieval_instance(inst: &RetrievalInstance) -> Check {
    let ranked: Vec<RankedList> = rank_gallery(&inst.queries, &inst.gallery).map_err(|e| e.to_string())?;
    let gallery = rows(&inst.gallery);
    let mut orders = Vec::new();
    for (qi, (q, r)) in rows(&inst.queries).iter().zip(&ranked).enumerate() {
        let order = brute_force_order(q, &gallery);
        let idx: Vec<usize> = order.iter().map(|o| o.0).collect();
        if idx != r.indices {
            return Err(format!("query {qi}: order {:?} vs brute force {idx:?}", r.indices));
        }
        for (a, b) in r.distances.iter().zip(&order) {
            if (a - b.1).abs() > 1e-9 {
                return Err(format!("query {qi}: distance {a} vs {}", b.1));
            }
        }
        orders.push(idx);
    }
    let (ql, gl) = (&inst.query_labels, &inst.gallery_labels);
    let mut prev = 0.0;
    for k in 1..=gl.len() {
        let got = cmc(&ranked, ql, gl, k).map_err(|e| e.to_string())?;
        let hits = orders.iter().zip(ql).filter(|(o, &q)| o[..k].iter().any(|&i| gl[i] == q)).count();
        let want = hits as f64 / ql.len() as f64;
        if (got - want).abs() > 1e-9 {
            return Err(format!("CMC@{k} = {got} vs {want}"));
        }
        if got < prev {
            return Err(format!("CMC decreases at k = {k}: {prev} -> {got}"));
        }
        prev = got;
    }
    let ap = average_precisions(&ranked, ql, gl).map_err(|e| e.to_string())?;
    for (qi, (o, &q)) in orders.iter().zip(ql).enumerate() {
        // AP as the mean precision at the rank of each relevant item.
        let relevant: Vec<usize> = o.iter().enumerate().filter(|(_, &i)| gl[i] == q).map(|(r, _)| r).collect();
        let want = relevant
            .iter()
            .map(|&r| o[..=r].iter().filter(|&&i| gl[i] == q).count() as f64 / (r + 1) as f64)
            .sum::<f64>()
            / relevant.len() as f64;
        if (ap[qi] - want).abs() > 1e-9 {
            return Err(format!("query {qi}: AP {} vs {want}", ap[qi]));
        }
    }
    Ok(())
}
