use autograd::nn::{add_conv, add_linear};
use autograd::{clip_grad_norm, Adam, AdamConfig, Graph, ParamGroup, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_net(rng: &mut ChaCha8Rng) -> ParamGroup<f64> {
    let mut p = ParamGroup::new();
    add_conv(&mut p, rng, "c", (1, 2, 3), 1.0);
    add_linear(&mut p, rng, "fc", (2, 1), 1.0);
    p
}

/// Global-average-pooled conv feature followed by a linear head.
fn forward(g: &mut Graph<f64>, p: &ParamGroup<f64>, x: &Tensor<f64>, trainable: bool) -> (autograd::Bound, autograd::Var) {
    let b = p.bind(g, trainable);
    let x = g.constant(x.clone());
    let h = g.conv2d(x, b.var("c.w"), Some(b.var("c.b")), 1, 1);
    let h = g.tanh(h);
    let h = g.mean_spatial(h);
    let out = g.linear(h, b.var("fc.w"), Some(b.var("fc.b")));
    (b, out)
}

fn inputs() -> (Tensor<f64>, Tensor<f64>) {
    let x = Tensor::from_vec(vec![4, 1, 3, 3], (0..36).map(|i| ((i * 7 % 11) as f64 / 5.0) - 1.0).collect()).unwrap();
    let y = Tensor::from_vec(vec![4, 1], vec![0.5, -0.5, 0.25, -0.25]).unwrap();
    (x, y)
}

fn loss(g: &mut Graph<f64>, out: autograd::Var, y: &Tensor<f64>) -> autograd::Var {
    let y = g.constant(y.clone());
    let d = g.sub(out, y);
    let d = g.square(d);
    g.mean(d)
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = conv_net(&mut rng);
    let (x, y) = inputs();
    let value = |p: &ParamGroup<f64>| {
        let mut g = Graph::new();
        let (_, out) = forward(&mut g, p, &x, false);
        let l = loss(&mut g, out, &y);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let (b, out) = forward(&mut g, &p, &x, true);
    let l = loss(&mut g, out, &y);
    let grads = b.grads(&g, &g.backward(l));
    for (name, t) in p.iter() {
        for i in 0..t.numel() {
            let h = 1e-6;
            let mut plus = p.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = p.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let analytic = grads.get(name).unwrap().data()[i];
            assert!((numeric - analytic).abs() < 1e-7, "{name}[{i}]: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn adam_fits_a_small_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = conv_net(&mut rng);
    let (x, y) = inputs();
    let mut opt = Adam::new(AdamConfig::with_lr(0.05), &p);
    let mut first = None;
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        let mut g = Graph::new();
        let (b, out) = forward(&mut g, &p, &x, true);
        let l = loss(&mut g, out, &y);
        last = g.value(l).item();
        first.get_or_insert(last);
        let mut grads = b.grads(&g, &g.backward(l));
        clip_grad_norm(&mut [&mut grads], 1.0);
        opt.update(&mut p, &grads);
    }
    assert!(last < 0.05 * first.unwrap(), "loss went from {first:?} to {last}");
}

#[test]
fn f32_and_f64_graphs_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = conv_net(&mut rng);
    let (x, _) = inputs();
    let mut g64 = Graph::new();
    let (_, o64) = forward(&mut g64, &p, &x, false);
    let p32: ParamGroup<f32> = p.iter().map(|(k, t)| (k.to_string(), t.cast())).collect();
    let mut g32 = Graph::new();
    let b = p32.bind(&mut g32, false);
    let xv = g32.constant(x.cast());
    let h = g32.conv2d(xv, b.var("c.w"), Some(b.var("c.b")), 1, 1);
    let h = g32.tanh(h);
    let h = g32.mean_spatial(h);
    let o32 = g32.linear(h, b.var("fc.w"), Some(b.var("fc.b")));
    for (a, b) in g64.value(o64).data().iter().zip(g32.value(o32).data()) {
        assert!((a - f64::from(*b)).abs() < 1e-5);
    }
}
