//! Shared finite-difference checks for isolated layers, used by the layer
//! gradient suite and the acceptance suite.
//!
//! Each check builds a small random instance in f64, takes the scalar loss
//! L = sum(output ⊙ U) for a fixed random weighting U (so the upstream
//! gradient fed to the backward is exactly U), and compares every analytic
//! input/parameter gradient coordinate against central differences at
//! h = 1e-3. Returns the maximum relative error observed.
#![allow(dead_code)] // each test target uses its own subset

use procanet_core::attention::{proca_backward, proca_forward, ProcaParams};
use procanet_core::autograd::{
    add_backward, add_forward, concat_backward, concat_channels, conv_backward, conv_forward,
    maxpool_backward, maxpool_forward, mul_backward, mul_forward, relative_error, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward, upsample_backward, upsample_forward,
};
use procanet_core::gradcheck::numeric_grad;
use procanet_core::kernels::ConvKernel;
use procanet_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;

fn dot(a: &Tensor<f64>, u: &Tensor<f64>) -> f64 {
    a.data().iter().zip(u.data()).map(|(x, w)| x * w).sum()
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn rand_kernel(out_ch: usize, in_ch: usize, ksize: usize, rng: &mut ChaCha8Rng) -> ConvKernel<f64> {
    let w = (0..out_ch * in_ch * ksize * ksize)
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let b = (0..out_ch).map(|_| rng.gen_range(-0.5..0.5)).collect();
    ConvKernel::new(out_ch, in_ch, ksize, w, b).unwrap()
}

/// Inputs for kink-free ReLU checks: magnitudes well clear of zero so a
/// ±h sweep cannot cross the gate.
fn offset_inputs(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product::<usize>();
    let vals = (0..len)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, vals).unwrap()
}

/// Inputs for maxpool checks: a shuffled uniform grid keeps every pair of
/// values at least 1/len apart, so a ±h perturbation cannot swap an argmax.
fn separated_inputs(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product::<usize>();
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 / len as f64).collect();
    vals.shuffle(rng);
    Tensor::from_vec(shape, vals).unwrap()
}

pub fn check_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 6, 6];
    let x = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let k = rand_kernel(4, 3, 3, &mut rng);
    let (y, _) = conv_forward(&x, &k).unwrap();
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);

    let (ctx_y, ctx) = conv_forward(&x, &k).unwrap();
    assert_eq!(ctx_y, y);
    let (dx, dk) = conv_backward(&k, &ctx, &u).unwrap();

    let nx = numeric_grad(
        x.data(),
        |v| dot(&conv_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &k).unwrap().0, &u),
        H,
    );
    let mut worst = max_rel(dx.data(), &nx);

    let nw = numeric_grad(
        &k.weight,
        |v| {
            let kk = ConvKernel::new(k.out_ch, k.in_ch, k.kh, v.to_vec(), k.bias.clone()).unwrap();
            dot(&conv_forward(&x, &kk).unwrap().0, &u)
        },
        H,
    );
    worst = worst.max(max_rel(&dk.d_weight, &nw));

    let nb = numeric_grad(
        &k.bias,
        |v| {
            let kk =
                ConvKernel::new(k.out_ch, k.in_ch, k.kh, k.weight.clone(), v.to_vec()).unwrap();
            dot(&conv_forward(&x, &kk).unwrap().0, &u)
        },
        H,
    );
    worst.max(max_rel(&dk.d_bias, &nb))
}

pub fn check_relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let x = offset_inputs(shape, &mut rng);
    let (y, ctx) = relu_forward(&x);
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let dx = relu_backward(&ctx, &u).unwrap();
    let nx = numeric_grad(
        x.data(),
        |v| dot(&relu_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap()).0, &u),
        H,
    );
    max_rel(dx.data(), &nx)
}

pub fn check_sigmoid(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let x = Tensor::<f64>::uniform(shape, -2.0, 2.0, &mut rng);
    let (y, ctx) = sigmoid_forward(&x);
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let dx = sigmoid_backward(&ctx, &u).unwrap();
    let nx = numeric_grad(
        x.data(),
        |v| dot(&sigmoid_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap()).0, &u),
        H,
    );
    max_rel(dx.data(), &nx)
}

pub fn check_maxpool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let x = separated_inputs(shape, &mut rng);
    let (y, ctx) = maxpool_forward(&x).unwrap();
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let dx = maxpool_backward(&ctx, &u).unwrap();
    let nx = numeric_grad(
        x.data(),
        |v| dot(&maxpool_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap()).unwrap().0, &u),
        H,
    );
    max_rel(dx.data(), &nx)
}

pub fn check_upsample(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let x = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let (y, ctx) = upsample_forward(&x);
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let dx = upsample_backward(&ctx, &u).unwrap();
    let nx = numeric_grad(
        x.data(),
        |v| dot(&upsample_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap()).0, &u),
        H,
    );
    max_rel(dx.data(), &nx)
}

pub fn check_mul(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let a = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let (y, ctx) = mul_forward(&a, &b).unwrap();
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let (da, db) = mul_backward(&ctx, &u).unwrap();
    let na = numeric_grad(
        a.data(),
        |v| dot(&mul_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &b).unwrap().0, &u),
        H,
    );
    let nb = numeric_grad(
        b.data(),
        |v| dot(&mul_forward(&a, &Tensor::from_vec(shape, v.to_vec()).unwrap()).unwrap().0, &u),
        H,
    );
    max_rel(da.data(), &na).max(max_rel(db.data(), &nb))
}

pub fn check_add(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let a = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let y = add_forward(&a, &b).unwrap();
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let (da, db) = add_backward(&u);
    let na = numeric_grad(
        a.data(),
        |v| dot(&add_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &b).unwrap(), &u),
        H,
    );
    let nb = numeric_grad(
        b.data(),
        |v| dot(&add_forward(&a, &Tensor::from_vec(shape, v.to_vec()).unwrap()).unwrap(), &u),
        H,
    );
    max_rel(da.data(), &na).max(max_rel(db.data(), &nb))
}

pub fn check_concat(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sa = [2, 3, 4, 4];
    let sb = [2, 2, 4, 4];
    let a = Tensor::<f64>::uniform(sa, -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(sb, -1.0, 1.0, &mut rng);
    let (y, ctx) = concat_channels(&a, &b).unwrap();
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let (da, db) = concat_backward(&ctx, &u).unwrap();
    let na = numeric_grad(
        a.data(),
        |v| dot(&concat_channels(&Tensor::from_vec(sa, v.to_vec()).unwrap(), &b).unwrap().0, &u),
        H,
    );
    let nb = numeric_grad(
        b.data(),
        |v| dot(&concat_channels(&a, &Tensor::from_vec(sb, v.to_vec()).unwrap()).unwrap().0, &u),
        H,
    );
    max_rel(da.data(), &na).max(max_rel(db.data(), &nb))
}

/// Two-layer composition (conv → relu → conv): the chain of per-layer
/// backwards must match finite differences end to end.
pub fn check_composition(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 2, 6, 6];
    // Positive inputs and a positive-weight first conv keep every ReLU
    // pre-activation clear of zero (same reasoning as the whole-net check).
    let x = Tensor::<f64>::uniform(shape, 0.1, 1.0, &mut rng);
    let mut k1 = rand_kernel(3, 2, 3, &mut rng);
    for w in k1.weight.iter_mut() {
        *w = w.abs() + 0.01;
    }
    for b in k1.bias.iter_mut() {
        *b = 0.1;
    }
    let k2 = rand_kernel(2, 3, 3, &mut rng);

    let fwd = |x: &Tensor<f64>| {
        let (h1, _) = conv_forward(x, &k1).unwrap();
        let (a1, _) = relu_forward(&h1);
        conv_forward(&a1, &k2).unwrap().0
    };
    let y = fwd(&x);
    let u = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);

    let (h1, c1) = conv_forward(&x, &k1).unwrap();
    let (a1, cr) = relu_forward(&h1);
    let (_, c2) = conv_forward(&a1, &k2).unwrap();
    let (da1, _) = conv_backward(&k2, &c2, &u).unwrap();
    let dh1 = relu_backward(&cr, &da1).unwrap();
    let (dx, _) = conv_backward(&k1, &c1, &dh1).unwrap();

    let nx = numeric_grad(
        x.data(),
        |v| dot(&fwd(&Tensor::from_vec(shape, v.to_vec()).unwrap()), &u),
        H,
    );
    max_rel(dx.data(), &nx)
}

/// Full attention block: both stream inputs and all four kernels, with
/// upstream gradients on the fused output and on both attended streams.
pub fn check_proca(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 3, 4, 4];
    let x_r = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let x_n = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let params = ProcaParams::new(
        rand_kernel(3, 3, 3, &mut rng),
        rand_kernel(3, 3, 3, &mut rng),
        rand_kernel(3, 3, 3, &mut rng),
        rand_kernel(3, 3, 3, &mut rng),
    )
    .unwrap();
    let u_fused = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let u_r = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let u_n = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);

    let loss = |x_r: &Tensor<f64>, x_n: &Tensor<f64>, p: &ProcaParams<f64>| {
        let t = proca_forward(x_r, x_n, p).unwrap();
        dot(&t.fused, &u_fused) + dot(&t.x_tilde_r, &u_r) + dot(&t.x_tilde_n, &u_n)
    };

    let trace = proca_forward(&x_r, &x_n, &params).unwrap();
    let (dx_r, dx_n, grads) =
        proca_backward(&params, &trace, Some(&u_fused), Some(&u_r), Some(&u_n)).unwrap();

    let mut worst = 0.0f64;
    let nr = numeric_grad(
        x_r.data(),
        |v| loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &x_n, &params),
        H,
    );
    worst = worst.max(max_rel(dx_r.data(), &nr));
    let nn = numeric_grad(
        x_n.data(),
        |v| loss(&x_r, &Tensor::from_vec(shape, v.to_vec()).unwrap(), &params),
        H,
    );
    worst = worst.max(max_rel(dx_n.data(), &nn));

    let kernel_grads = [
        ("self_r", &grads.self_r),
        ("self_n", &grads.self_n),
        ("cross_r_to_n", &grads.cross_r_to_n),
        ("cross_n_to_r", &grads.cross_n_to_r),
    ];
    for (name, kg) in kernel_grads {
        let base = params.clone();
        let rebuild = |w: Vec<f64>, b: Vec<f64>| {
            let mk = |k: &ConvKernel<f64>| k.clone();
            let patched = ConvKernel::new(3, 3, 3, w, b).unwrap();
            let ks = match name {
                "self_r" => (patched.clone(), mk(&base.w_self_n), mk(&base.w_cross_r_to_n), mk(&base.w_cross_n_to_r)),
                "self_n" => (mk(&base.w_self_r), patched.clone(), mk(&base.w_cross_r_to_n), mk(&base.w_cross_n_to_r)),
                "cross_r_to_n" => (mk(&base.w_self_r), mk(&base.w_self_n), patched.clone(), mk(&base.w_cross_n_to_r)),
                _ => (mk(&base.w_self_r), mk(&base.w_self_n), mk(&base.w_cross_r_to_n), patched),
            };
            ProcaParams::new(ks.0, ks.1, ks.2, ks.3).unwrap()
        };
        let orig = match name {
            "self_r" => &params.w_self_r,
            "self_n" => &params.w_self_n,
            "cross_r_to_n" => &params.w_cross_r_to_n,
            _ => &params.w_cross_n_to_r,
        };
        let nw = numeric_grad(
            &orig.weight,
            |v| loss(&x_r, &x_n, &rebuild(v.to_vec(), orig.bias.clone())),
            H,
        );
        worst = worst.max(max_rel(&kg.d_weight, &nw));
        let nb = numeric_grad(
            &orig.bias,
            |v| loss(&x_r, &x_n, &rebuild(orig.weight.clone(), v.to_vec())),
            H,
        );
        worst = worst.max(max_rel(&kg.d_bias, &nb));
    }
    worst
}

/// Every per-layer check, as (name, max relative error).
pub fn all_layer_checks(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv", check_conv(seed)),
        ("relu", check_relu(seed)),
        ("sigmoid", check_sigmoid(seed)),
        ("maxpool", check_maxpool(seed)),
        ("upsample", check_upsample(seed)),
        ("mul", check_mul(seed)),
        ("add", check_add(seed)),
        ("concat", check_concat(seed)),
        ("conv-relu-conv", check_composition(seed)),
        ("proca", check_proca(seed)),
    ]
}
