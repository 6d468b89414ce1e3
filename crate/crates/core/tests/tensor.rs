use proptest::prelude::*;
use refmel::tensor::{
    clip_grad_norm, global_norm, AdamConfig, AdamState, GradSet, Graph, ParamSet, Tensor,
};
use refmel::train::op_gradient_checks;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn matrix(max: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0..5.0f64, r * c).prop_map(move |d| tensor(&[r, c], d))
    })
}

#[test]
fn every_op_matches_central_differences_over_ten_seeds() {
    for seed in 0..10 {
        for (name, report) in op_gradient_checks(seed).unwrap() {
            assert!(
                report.max_rel_error < 1e-5,
                "{name} seed {seed}: {report:?}"
            );
            assert!(report.coords_checked > 0, "{name}");
        }
    }
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::new();
    let a = g.leaf(tensor(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let b = g.leaf(tensor(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn backward_leaves_graph_reusable() {
    let mut g = Graph::new();
    let x = g.leaf(tensor(&[3], vec![1.0, -2.0, 3.0]).with_grad());
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    let first = g.backward(s).unwrap();
    let second = g.backward(s).unwrap();
    assert_eq!(first.get(x), second.get(x));
    assert_eq!(first.get(x).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn adam_bias_corrected_first_step() {
    let mut p = ParamSet::new();
    p.insert("w", tensor(&[2], vec![1.0, -1.0])).unwrap();
    let mut adam = AdamState::new(&p, AdamConfig::default());
    adam.step(&mut p, &GradSet(vec![vec![0.5, -3.0]])).unwrap();
    let w = p.get("w").unwrap().data();
    // The first bias-corrected step moves each coordinate by lr * sign(g).
    assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
    assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
}

proptest! {
    #[test]
    fn matmul_by_identity_is_exact(a in matrix(6)) {
        let mut g = Graph::new();
        let x = g.leaf(a.clone());
        let i = g.leaf(Tensor::eye(a.cols()));
        let y = g.matmul(x, i).unwrap();
        prop_assert_eq!(g.value(y), &a);
    }

    #[test]
    fn broadcast_add_is_commutative(a in matrix(5), seed in any::<u64>()) {
        let cols = a.cols();
        let row: Vec<f64> = (0..cols).map(|j| ((seed >> (j % 60)) & 0xff) as f64 / 64.0).collect();
        let mut g = Graph::new();
        let x = g.leaf(a);
        let r = g.leaf(tensor(&[1, cols], row));
        let l = g.add(x, r).unwrap();
        let rr = g.add(r, x).unwrap();
        prop_assert_eq!(g.value(l), g.value(rr));
    }

    #[test]
    fn softmax_rows_are_distributions(a in matrix(6)) {
        let mut g = Graph::new();
        let x = g.leaf(a);
        let s = g.softmax(x);
        let v = g.value(s);
        for r in 0..v.rows() {
            let row = v.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(a in matrix(6)) {
        let w = a.cols();
        let mut g = Graph::new();
        let x = g.leaf(a);
        let gain = g.leaf(Tensor::full([w], 1.0));
        let bias = g.leaf(Tensor::zeros([w]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y);
        for r in 0..v.rows() {
            prop_assert!(v.row(r).iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn clipping_caps_the_norm_and_is_idempotent(
        grads in prop::collection::vec(prop::collection::vec(-100.0..100.0f64, 1..20), 1..5),
        threshold in 0.01..10.0f64,
    ) {
        let mut g = GradSet(grads);
        let pre = global_norm(&g);
        let post = clip_grad_norm(&mut g, threshold);
        prop_assert!((post - pre.min(threshold)).abs() <= 1e-12 * threshold.max(1.0));
        prop_assert!((global_norm(&g) - post).abs() <= 1e-12 * threshold.max(1.0));
        let once = g.clone();
        clip_grad_norm(&mut g, threshold);
        for (a, b) in g.arrays().iter().zip(once.arrays()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn transpose_twice_is_identity(a in matrix(6)) {
        let mut g = Graph::new();
        let x = g.leaf(a.clone());
        let t = g.transpose(x).unwrap();
        let tt = g.transpose(t).unwrap();
        prop_assert_eq!(g.value(tt), &a);
    }
}
