//! Finite-difference checks of every tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{ConvSpec, Graph, Var};
use super::layers::*;
use super::params::{Init, ParamStore};
use super::tensor::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares analytic gradients of `sum(r * f(x))` against central differences
/// for the input and every parameter.
fn check(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new(store, true);
    let xi = g.input_with_grad(x.clone());
    let y = f(&mut g, xi);
    let r = rand_tensor(g.value(y).shape(), &mut rng);
    let (pg, node_grads) = g.backward_with_inputs(y, r.clone());
    let dx = node_grads[0].clone().expect("input gradient");

    let objective = |st: &ParamStore, xx: &Tensor| -> f64 {
        let mut g = Graph::new(st, true);
        let xi = g.input(xx.clone());
        let y = f(&mut g, xi);
        g.value(y)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum()
    };
    let h = 1e-2f32;
    let tol = |a: f64, n: f64| (a - n).abs() <= 2e-2 * (1.0 + n.abs());

    for i in (0..x.len()).step_by((x.len() / 40).max(1)) {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[i] += h;
        b.data_mut()[i] -= h;
        let num = (objective(store, &a) - objective(store, &b)) / (2.0 * h as f64);
        let ana = dx.data()[i] as f64;
        assert!(tol(ana, num), "input grad {i}: analytic {ana} numeric {num}");
    }
    for (pi, p) in store.params().iter().enumerate() {
        let id = super::params::ParamId(pi);
        let grad = pg.get(id).expect("param gradient");
        for j in (0..p.value.len()).step_by((p.value.len() / 20).max(1)) {
            let (mut sa, mut sb) = (store.clone(), store.clone());
            sa.value_mut(id)[j] += h;
            sb.value_mut(id)[j] -= h;
            let num = (objective(&sa, x) - objective(&sb, x)) / (2.0 * h as f64);
            let ana = grad[j] as f64;
            assert!(tol(ana, num), "param {} [{j}]: analytic {ana} numeric {num}", p.name);
        }
    }
}

#[test]
fn conv_3x3_same_and_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut st = ParamStore::new();
    let c1 = Conv2d::new(&mut st, "c1", 3, 4, 3, 1, true, &mut rng);
    let c2 = Conv2d::new(&mut st, "c2", 4, 2, 3, 2, true, &mut rng);
    let x = rand_tensor(&[2, 6, 6, 3], &mut rng);
    check(&st, &x, |g, x| {
        let y = c1.forward(g, x);
        c2.forward(g, y)
    });
}

#[test]
fn pointwise_conv_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut st = ParamStore::new();
    let c = Conv2d::new(&mut st, "pw", 3, 5, 1, 1, true, &mut rng);
    let l = Linear::new(&mut st, "fc", 4 * 5, 3, &mut rng);
    let x = rand_tensor(&[2, 2, 2, 3], &mut rng);
    check(&st, &x, |g, x| {
        let y = c.forward(g, x);
        let f = g.flatten(y);
        l.forward(g, f)
    });
}

#[test]
fn depthwise_and_up_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut st = ParamStore::new();
    let d = DepthwiseConv2d::new(&mut st, "dw", 3, 5, 2, &mut rng);
    let u = UpConv2d::new(&mut st, "up", 3, 2, true, &mut rng);
    let x = rand_tensor(&[1, 6, 6, 3], &mut rng);
    check(&st, &x, |g, x| {
        let y = d.forward(g, x);
        u.forward(g, y)
    });
}

#[test]
fn batch_norm_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut st = ParamStore::new();
    let bn = BatchNorm2d::new(&mut st, "bn", 3, &mut rng);
    // non-trivial affine part
    st.value_mut(bn.gamma).copy_from_slice(&[0.5, 1.5, -0.7]);
    st.value_mut(bn.beta).copy_from_slice(&[0.1, -0.2, 0.3]);
    let x = rand_tensor(&[2, 3, 3, 3], &mut rng);
    check(&st, &x, |g, x| bn.forward(g, x));
}

#[test]
fn pooling_activations_and_merges() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut st = ParamStore::new();
    let c = Conv2d::new(&mut st, "c", 2, 2, 3, 1, true, &mut rng);
    let x = rand_tensor(&[2, 4, 4, 2], &mut rng);
    check(&st, &x, |g, x| {
        let a = c.forward(g, x);
        let r = g.relu(a);
        let s = g.silu(a);
        let p = g.max_pool2(r);
        let cat = g.concat(x, s);
        let gp = g.global_avg_pool(cat);
        let sg = g.sigmoid(gp);
        let sc = g.scale_channels(cat, sg);
        let sum = g.add(sc, sc);
        let q = g.max_pool2(sum);
        let f1 = g.flatten(q);
        let f2 = g.flatten(p);
        let _ = f2;
        f1
    });
}

#[test]
fn bn_eval_uses_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut st = ParamStore::new();
    let bn = BatchNorm2d::new(&mut st, "bn", 2, &mut rng);
    let x = rand_tensor(&[4, 2, 2, 2], &mut rng);
    let mut g = Graph::new(&st, true);
    let xi = g.input(x.clone());
    bn.forward(&mut g, xi);
    let updates = g.into_bn_updates();
    st.apply_bn_updates(&updates);
    assert!(st.buffer(bn.mean).iter().any(|&m| m != 0.0));

    // identical inputs give identical outputs in eval mode regardless of batch
    let mut g = Graph::new(&st, false);
    let one = x.batch_item(0);
    let two = Tensor::stack(&[one.clone(), one.clone()]).unwrap();
    let xi = g.input(two);
    let y = bn.forward(&mut g, xi);
    let v = g.value(y).data();
    let half = v.len() / 2;
    assert_eq!(&v[..half], &v[half..]);
    let _ = Init::Zeros;
    let _ = ConvSpec {
        k: 1,
        stride: 1,
        pad: 0,
    };
}
