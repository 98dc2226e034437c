//! Graph builders for the five networks.
//!
//! Each function appends one network's forward pass to a graph, reading its
//! weights from a [`Bound`] parameter group.

use autograd::{Bound, Graph, Scalar, Var};

use super::{Fusion, NetConfig};

const LEAK: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Convolution `{name}.w`, `{name}.b` with optional spectral normalisation.
///
/// When `spectral` is set the weight is divided by its largest singular
/// value, which is treated as a constant during differentiation.
fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize, spectral: bool) -> Var {
    let mut w = p.var(&format!("{name}.w"));
    if spectral {
        let sigma = autograd::nn::spectral_norm(g.value(w), 5);
        if sigma > 0.0 {
            w = g.scale(w, T::lit(1.0 / sigma));
        }
    }
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(p.var(&format!("{name}.b"))), stride, k / 2)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    g.linear(x, p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))))
}

fn inorm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    let n = g.instance_norm(x, T::lit(NORM_EPS));
    g.channel_affine(n, p.var(&format!("{name}.g")), p.var(&format!("{name}.b")))
}

/// `E_C`: strided residual blocks, global average pooling, linear head.
/// Input `[N, 3, H, W]`, output `[N, d]`.
pub fn content_encoder<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, x: Var) -> Var {
    let mut h = x;
    for i in 0..cfg.content_widths.len() {
        let d = conv(g, p, &format!("block{i}.down"), h, 2, false);
        let d = g.relu(d);
        let r = conv(g, p, &format!("block{i}.res"), d, 1, false);
        let s = g.add(d, r);
        h = g.relu(s);
    }
    let pooled = g.mean_spatial(h);
    let v = linear(g, p, "head", pooled);
    if cfg.normalize_content {
        l2_normalize(g, v)
    } else {
        v
    }
}

/// Divides each row by its norm (plus a small epsilon).
fn l2_normalize<T: Scalar>(g: &mut Graph<T>, v: Var) -> Var {
    let norm = g.row_norm(v);
    let norm = g.add_scalar(norm, T::lit(1e-6));
    let inv = g.recip(norm);
    g.row_scale(v, inv)
}

/// `E_P`: four strided conv blocks, flatten, linear head.
/// Input `[N, 18, H, W]`, output `[N, h]`.
pub fn pose_encoder<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, pose: Var) -> Var {
    let mut h = pose;
    for i in 0..cfg.pose_widths.len() {
        let c = conv(g, p, &format!("block{i}"), h, 2, false);
        h = g.relu(c);
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
    linear(g, p, "head", flat)
}

fn res_block<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    let a = inorm(g, p, &format!("{name}.n0"), x);
    let a = g.relu(a);
    let a = conv(g, p, &format!("{name}.c0"), a, 1, false);
    let a = inorm(g, p, &format!("{name}.n1"), a);
    let a = g.relu(a);
    let a = conv(g, p, &format!("{name}.c1"), a, 1, false);
    g.add(x, a)
}

/// `G_S` / `G_T`: fuse `(v_p, v_c)` into a low-resolution tensor, then
/// alternate residual blocks and 2x upsampling; `tanh` output `[N, 3, H, W]`.
pub fn generator<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, vp: Var, vc: Var) -> Var {
    let n = g.shape(vc)[0];
    let (h0, w0) = cfg.generator_base();
    let c0 = cfg.generator_widths[0];
    let mut x = match cfg.fusion {
        Fusion::Concat => {
            let z = g.concat(&[vp, vc]);
            let z = linear(g, p, "fuse", z);
            g.reshape(z, &[n, c0, h0, w0])
        }
        Fusion::Broadcast => {
            let z = linear(g, p, "fuse", vc);
            let z = g.reshape(z, &[n, c0, h0, w0]);
            let t = g.tile(vp, h0, w0);
            let z = g.concat(&[z, t]);
            conv(g, p, "fuse_conv", z, 1, false)
        }
    };
    let stages = cfg.generator_widths.len();
    for i in 0..stages {
        if i < cfg.generator_res_blocks {
            x = res_block(g, p, &format!("res{i}"), x);
        }
        if i + 1 < stages {
            let a = inorm(g, p, &format!("up{i}.n"), x);
            let a = g.relu(a);
            let a = g.upsample(a, 2);
            x = conv(g, p, &format!("up{i}.c"), a, 1, false);
        }
    }
    let a = inorm(g, p, "out.n", x);
    let a = g.relu(a);
    let a = conv(g, p, "out.c", a, 1, false);
    g.tanh(a)
}

/// `D_S` / `D_T`: strided convs, global pooling, sigmoid score `[N, 1]`.
pub fn domain_discriminator<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, x: Var) -> Var {
    let mut h = x;
    for i in 0..cfg.domain_disc_widths.len() {
        let c = conv(g, p, &format!("block{i}"), h, 2, cfg.spectral_norm);
        h = g.leaky_relu(c, T::lit(LEAK));
    }
    let pooled = g.mean_spatial(h);
    let logit = linear(g, p, "head", pooled);
    g.sigmoid(logit)
}

/// `D_P`: PatchGAN over the channel concatenation of image and pose map.
/// Returns a sigmoid confidence map `[N, 1, H', W']`.
pub fn pose_discriminator<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, x: Var, pose: Var) -> Var {
    pose_discriminator_shared(g, p, cfg, &[x], &[pose], &[0])
}

/// `D_P` on each `images[i]` paired with `poses[which[i]]`, stacked along the
/// batch. The first convolution is split into its image and pose channels so
/// each pose batch is convolved once however many image batches share it.
pub fn pose_discriminator_shared<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetConfig,
    images: &[Var],
    poses: &[Var],
    which: &[usize],
) -> Var {
    assert_eq!(images.len(), which.len(), "one pose index per image batch");
    let mut wi = p.var("block0.img.w");
    let mut wp = p.var("block0.pose.w");
    if cfg.spectral_norm {
        // normalise the two halves as the single kernel they form
        let (a, b) = (g.value(wi), g.value(wp));
        let rows = a.shape()[0];
        let (ca, cb) = (a.numel() / rows, b.numel() / rows);
        let mut joint = Vec::with_capacity(a.numel() + b.numel());
        for r in 0..rows {
            joint.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
            joint.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
        }
        let joint = autograd::Tensor::from_vec(vec![rows, ca + cb], joint).expect("shape");
        let sigma = autograd::nn::spectral_norm(&joint, 5);
        if sigma > 0.0 {
            wi = g.scale(wi, T::lit(1.0 / sigma));
            wp = g.scale(wp, T::lit(1.0 / sigma));
        }
    }
    let stride = |i: usize| if i < cfg.pose_disc_downsample { 2 } else { 1 };
    let x = g.cat_rows(images);
    let a = g.conv2d(x, wi, Some(p.var("block0.b")), stride(0), 1);
    let per_pose: Vec<Var> = poses.iter().map(|&q| g.conv2d(q, wp, None, stride(0), 1)).collect();
    let b = g.cat_rows(&which.iter().map(|&j| per_pose[j]).collect::<Vec<_>>());
    let s = g.add(a, b);
    let mut h = g.leaky_relu(s, T::lit(LEAK));
    for i in 1..cfg.pose_disc_widths.len() {
        let c = conv(g, p, &format!("block{i}"), h, stride(i), cfg.spectral_norm);
        h = g.leaky_relu(c, T::lit(LEAK));
    }
    let logit = conv(g, p, "head", h, 1, cfg.spectral_norm);
    g.sigmoid(logit)
}
