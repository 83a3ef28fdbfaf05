use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

/// Central-difference gradient of a scalar function of one tensor.
fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let h = 1e-6;
    (0..x.numel())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fu = f(&t(x.shape(), &up)).item().unwrap();
            let fd = f(&t(x.shape(), &dn)).item().unwrap();
            (fu - fd) / (2.0 * h)
        })
        .collect()
}

fn check_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) {
    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let y = f(&leaf);
    let g = tape.backward(&y).unwrap().wrt(&leaf).unwrap();
    let num = numeric_grad(x, f);
    for (i, (a, n)) in g.data().iter().zip(&num).enumerate() {
        assert!(
            (a - n).abs() <= 1e-5 * (1.0 + n.abs()),
            "component {i}: analytic {a} vs numeric {n}"
        );
    }
}

fn sample(shape: &[usize], seed: u64) -> Tensor {
    // Small deterministic LCG so the tests need no RNG dependency.
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape.to_vec(), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let y = Tensor::vector(vec![0.0, 0.0]).softmax().unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul_is_identity() {
    let x = sample(&[3, 4], 1);
    let y = Tensor::eye(3).matmul(&x).unwrap();
    assert_eq!(y, x);
}

#[test]
fn exp_log_softmax_sums_to_one() {
    let x = sample(&[5, 7], 2).mul_scalar(20.0);
    let p = x.log_softmax().unwrap().exp().sum_axis(-1, false).unwrap();
    for v in p.data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn log_softmax_handles_large_logits() {
    let x = Tensor::vector(vec![1000.0, 0.0, -1000.0]);
    let y = x.log_softmax().unwrap();
    assert!(y.all_finite());
    assert!((y.data()[0]).abs() < 1e-12);
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.0, -2.0, 3.0]));
    let loss = x.square().reduce_sum();
    let g = tape.backward(&loss).unwrap().wrt(&x).unwrap();
    assert_eq!(g.data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let y = x.mul(&x.detach()).unwrap();
    let g = tape.backward(&y).unwrap().wrt(&x).unwrap();
    assert_eq!(g.item().unwrap(), 3.0);
}

#[test]
fn unreachable_leaf_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
    let z = tape.leaf(&Tensor::vector(vec![5.0]));
    let g = tape.backward(&x.reduce_sum()).unwrap();
    assert_eq!(g.wrt(&z).unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let tape = Tape::new();
    let other = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(&x), Err(Error::Tape(_))));
    let y = other.leaf(&Tensor::scalar(1.0));
    assert!(matches!(tape.backward(&y), Err(Error::Tape(_))));
    assert!(matches!(x.add(&y), Err(Error::Tape(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let err = Tensor::zeros([2, 3]).add(&Tensor::zeros([2])).unwrap_err();
    assert_eq!(err.to_string(), "shape mismatch in add: [2, 3] vs [2]");
}

#[test]
fn gather_picks_rows_and_scatters_gradient() {
    let x = t(&[2, 3], &[0., 1., 2., 3., 4., 5.]);
    let idx = t(&[2], &[2., 0.]);
    assert_eq!(x.gather(1, &idx).unwrap().data(), &[2., 3.]);
    let items = t(&[4, 2], &[0., 1., 10., 11., 20., 21., 30., 31.]);
    let slate = t(&[3], &[3., 3., 1.]);
    let g = items.gather(0, &slate).unwrap();
    assert_eq!(g.shape(), &[3, 2]);
    assert_eq!(g.data(), &[30., 31., 30., 31., 10., 11.]);
    assert!(matches!(x.gather(1, &t(&[2], &[3., 0.])), Err(Error::IndexOutOfRange { .. })));
    check_grad(&items, &|x| x.gather(0, &slate).unwrap().square().reduce_sum());
}

#[test]
fn top_k_and_argmax_break_ties_low() {
    let x = Tensor::vector(vec![1.0, 3.0, 3.0, 2.0]);
    assert_eq!(x.argmax_last().unwrap().item().unwrap(), 1.0);
    assert_eq!(x.top_k_last(3).unwrap().data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn gradients_match_finite_differences() {
    let x = sample(&[3, 4], 7);
    let w = sample(&[4, 2], 8);
    let pos = sample(&[3, 4], 9).map(|v| v.abs() + 0.5);
    type Case = (&'static str, Tensor, Box<dyn Fn(&Tensor) -> Tensor>);
    let cases: Vec<Case> = vec![
        ("add_broadcast", x.clone(), Box::new(|x| x.add(&Tensor::vector(vec![1., 2., 3., 4.])).unwrap().square().reduce_sum())),
        ("sub", x.clone(), Box::new(|x| Tensor::ones([4]).sub(x).unwrap().square().reduce_mean())),
        ("mul", x.clone(), Box::new(|x| x.mul(x).unwrap().mul(x).unwrap().reduce_sum())),
        ("div", pos.clone(), Box::new(|x| Tensor::ones([3, 1]).div(x).unwrap().reduce_sum())),
        ("div_num", x.clone(), Box::new(|x| x.div(&Tensor::scalar(3.0)).unwrap().square().reduce_sum())),
        ("exp_log", pos.clone(), Box::new(|x| x.ln().exp().ln().reduce_sum())),
        ("sqrt", pos.clone(), Box::new(|x| x.sqrt().reduce_sum())),
        ("tanh_sigmoid", x.clone(), Box::new(|x| x.tanh().sigmoid().reduce_sum())),
        ("softplus", x.mul_scalar(5.0), Box::new(|x| x.softplus().reduce_sum())),
        ("abs_relu", pos.clone(), Box::new(|x| x.abs().relu().square().reduce_sum())),
        ("clamp", x.clone(), Box::new(|x| x.clamp(-0.5, 0.5).square().reduce_sum())),
        ("matmul_lhs", x.clone(), {
            let w = w.clone();
            Box::new(move |x| x.matmul(&w).unwrap().tanh().reduce_sum())
        }),
        ("matmul_rhs", w.clone(), {
            let x = x.clone();
            Box::new(move |w| x.matmul(w).unwrap().tanh().reduce_sum())
        }),
        ("batched_matmul", sample(&[2, 3, 2], 10), {
            let b = sample(&[2, 2, 3], 11);
            Box::new(move |a| a.matmul(&b).unwrap().square().reduce_sum())
        }),
        ("sum_axis", x.clone(), Box::new(|x| x.sum_axis(0, true).unwrap().square().reduce_sum())),
        ("mean_axis", x.clone(), Box::new(|x| x.mean_axis(1, false).unwrap().exp().reduce_sum())),
        ("max_axis", x.clone(), Box::new(|x| x.max_axis(-1, false).unwrap().square().reduce_sum())),
        ("softmax", x.clone(), Box::new(|x| x.softmax().unwrap().mul(&Tensor::vector(vec![1., -2., 3., 0.5])).unwrap().reduce_sum())),
        ("log_softmax", x.clone(), Box::new(|x| x.log_softmax().unwrap().narrow(1, 1, 2).unwrap().reduce_sum())),
        ("logsumexp", x.clone(), Box::new(|x| x.logsumexp().unwrap().square().reduce_sum())),
        ("l2", x.clone(), Box::new(|x| x.squared_l2_norm().unwrap().sqrt().reduce_sum())),
        ("reshape", x.clone(), Box::new(|x| x.reshape([2, 6]).unwrap().softmax().unwrap().narrow(1, 0, 1).unwrap().reduce_sum())),
        ("broadcast_to", sample(&[4], 12), Box::new(|x| x.broadcast_to([3, 4]).unwrap().mul(&sample(&[3, 4], 13)).unwrap().reduce_sum())),
        ("concat", x.clone(), Box::new(|x| Tensor::concat(&[x, &x.square()], 1).unwrap().softmax().unwrap().narrow(1, 0, 3).unwrap().reduce_sum())),
        ("stack", x.clone(), Box::new(|x| Tensor::stack(&[x, &x.exp()]).unwrap().logsumexp().unwrap().reduce_sum())),
        ("select", x.clone(), Box::new(|x| {
            let mask = x.map(|v| (v > 0.0) as u8 as f64);
            Tensor::select(&mask, &x.square(), &x.exp()).unwrap().reduce_sum()
        })),
    ];
    for (name, input, f) in &cases {
        eprintln!("checking {name}");
        check_grad(input, f.as_ref());
    }
}

#[test]
fn taped_and_untaped_forward_agree() {
    let x = sample(&[4, 5], 3);
    let f = |x: &Tensor| x.tanh().matmul(&Tensor::eye(5)).unwrap().log_softmax().unwrap();
    let tape = Tape::new();
    assert_eq!(f(&tape.leaf(&x)), f(&x));
}
