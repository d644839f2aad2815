//! Invariants of networks, kernels, samplers and targets on random inputs.

use ndarray::{Array1, Array2};
use nhl::complexity::{balance_layers, depth_sep_target, DepthSepKind};
use nhl::kernels::{cka, layer_kernel_gram, min_norm_in_span, tangent_gram, GramMatrix, KernelLadder};
use nhl::linear_mf::residual;
use nhl::sampler::subsample_with_indices;
use nhl::{init_network, ActivationKind, InitSpec, Network};
use proptest::prelude::*;

fn net_strategy(acts: Vec<ActivationKind>) -> impl Strategy<Value = Network> {
    (2usize..=4, 1usize..=10, 1usize..=4, proptest::sample::select(acts), any::<u64>(), 0.2f64..2.0).prop_map(
        |(depth, width, d, act, seed, std)| {
            let spec = InitSpec { std_a: std, std_z: std, std_w: std, ..InitSpec::standard(depth, width, d, act, seed) };
            init_network::<f64>(&spec).unwrap()
        },
    )
}

fn vec_in(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array1<f64>> {
    proptest::collection::vec(lo..hi, d).prop_map(Array1::from)
}

fn net_and_points(acts: Vec<ActivationKind>, k: usize) -> impl Strategy<Value = (Network, Array2<f64>)> {
    net_strategy(acts).prop_flat_map(move |net| {
        let d = net.input_dim();
        (Just(net), proptest::collection::vec(-2.0f64..2.0, k * d).prop_map(move |v| Array2::from_shape_vec((k, d), v).unwrap()))
    })
}

fn norm(x: &Array1<f64>) -> f64 {
    x.dot(x).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn homogeneous_activations_give_homogeneous_outputs(
        (net, x) in net_and_points(vec![ActivationKind::Relu, ActivationKind::Identity], 1),
        c in 0.0f64..5.0,
    ) {
        let x = x.row(0).to_owned();
        let f = net.forward(x.view()).unwrap().f;
        let fc = net.forward((&x * c).view()).unwrap().f;
        prop_assert!((fc - c * f).abs() <= 1e-10 * (1.0 + (c * f).abs()));
    }

    #[test]
    fn output_is_bounded_by_ladder_complexity(
        (net, x) in net_and_points(vec![ActivationKind::Relu, ActivationKind::Tanh], 2),
    ) {
        let bound = net.complexity_upper_bound(2.0).unwrap();
        let (x0, x1) = (x.row(0).to_owned(), x.row(1).to_owned());
        let f0 = net.forward(x0.view()).unwrap().f;
        let f1 = net.forward(x1.view()).unwrap().f;
        prop_assert!(f0.abs() <= bound * norm(&x0) * (1.0 + 1e-12) + 1e-300);
        prop_assert!((f0 - f1).abs() <= bound * norm(&(&x0 - &x1)) * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn group_norms_increase_with_p(net in net_strategy(vec![ActivationKind::Relu, ActivationKind::Tanh]), p in 2.0f64..8.0, dp in 0.0f64..4.0) {
        for l in 1..=net.depth() {
            let lo = net.group_norm(l, p).unwrap();
            let hi = net.group_norm(l, p + dp).unwrap();
            let top = net.group_norm(l, f64::INFINITY).unwrap();
            prop_assert!(lo <= hi * (1.0 + 1e-12));
            prop_assert!(hi <= top * (1.0 + 1e-12));
        }
    }

    #[test]
    fn forward_is_deterministic((net, x) in net_and_points(vec![ActivationKind::Relu, ActivationKind::Tanh, ActivationKind::Identity], 3)) {
        let a = net.forward_batch(x.view()).unwrap();
        let b = net.clone().forward_batch(x.view()).unwrap();
        prop_assert_eq!(a.f, b.f);
        prop_assert_eq!(a.h, b.h);
    }

    #[test]
    fn kernel_grams_are_psd_and_symmetric((net, x) in net_and_points(vec![ActivationKind::Relu, ActivationKind::Tanh, ActivationKind::Identity], 6)) {
        for l in 0..net.depth() {
            let k = layer_kernel_gram(&net, x.view(), l).unwrap();
            prop_assert!(k.is_psd(), "kappa{} min eig {}", l, k.min_eigenvalue());
            prop_assert!(k.max_asymmetry() <= 1e-12 * k.trace().abs().max(1.0));
        }
        let theta = tangent_gram(&net, x.view()).unwrap();
        prop_assert!(theta.is_psd(), "theta min eig {}", theta.min_eigenvalue());
        let ladder = KernelLadder::compute(&net, x.view()).unwrap();
        for g in &ladder.gamma {
            let g = GramMatrix::new("gamma", g.clone()).unwrap();
            prop_assert!(g.max_asymmetry() <= 1e-12 * g.trace().abs().max(1.0));
        }
    }

    #[test]
    fn kernel_diagonal_bound((net, x) in net_and_points(vec![ActivationKind::Relu, ActivationKind::Tanh], 3)) {
        let mut prod = 1.0;
        for l in 1..net.depth() {
            prod *= net.group_norm(l, 2.0).unwrap();
            let k = layer_kernel_gram(&net, x.view(), l).unwrap();
            for i in 0..x.nrows() {
                let xx = x.row(i).dot(&x.row(i));
                prop_assert!(k.entries[[i, i]] <= prod * prod * xx * (1.0 + 1e-12) + 1e-300);
            }
        }
    }

    #[test]
    fn min_norm_decreases_with_ridge((net, x) in net_and_points(vec![ActivationKind::Relu, ActivationKind::Tanh], 5), y in vec_in(5, -1.0, 1.0), lam in 1e-6f64..1.0, extra in 0.0f64..2.0) {
        let k = layer_kernel_gram(&net, x.view(), 1).unwrap();
        let a = min_norm_in_span(&k, y.view(), lam).unwrap();
        let b = min_norm_in_span(&k, y.view(), lam + extra).unwrap();
        prop_assert!(b <= a * (1.0 + 1e-10));
    }

    #[test]
    fn cka_ignores_constant_shifts(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let net = init_network::<f64>(&InitSpec::standard(3, 6, 2, ActivationKind::Tanh, seed)).unwrap();
        let x = Array2::from_shape_fn((6, 2), |(i, j)| ((3 * i + j) as f64 * 0.7).sin());
        let k1 = layer_kernel_gram(&net, x.view(), 1).unwrap();
        let k2 = layer_kernel_gram(&net, x.view(), 2).unwrap();
        let shifted = GramMatrix::new("shifted", k1.entries.mapv(|v| v + shift)).unwrap();
        let base = cka(&k1, &k2).unwrap();
        let moved = cka(&shifted, &k2).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn residual_is_affine(v1 in vec_in(3, -2.0, 2.0), v2 in vec_in(3, -2.0, 2.0), vs in vec_in(3, -2.0, 2.0), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let sigma = ndarray::array![[2.0, 0.1, 0.0], [0.1, 1.0, 0.3], [0.0, 0.3, 0.5]];
        let lhs = residual(&(&v1 * a + &v2 * b), &sigma, &vs).unwrap();
        let zero = residual(&Array1::zeros(3), &sigma, &vs).unwrap();
        let rhs = residual(&v1, &sigma, &vs).unwrap() * a + residual(&v2, &sigma, &vs).unwrap() * b + zero * (1.0 - a - b);
        prop_assert!((&lhs - &rhs).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn full_width_identity_sampling_is_exact((net, x) in net_and_points(vec![ActivationKind::Relu, ActivationKind::Tanh], 2)) {
        let ident: Vec<usize> = (0..net.width()).collect();
        let sub = subsample_with_indices(&net, &vec![ident; net.depth() - 1]).unwrap();
        let (a, b) = (sub.predict(x.view()).unwrap(), net.predict(x.view()).unwrap());
        for (u, v) in a.iter().zip(b.iter()) {
            prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn balancing_is_output_preserving((net, x) in net_and_points(vec![ActivationKind::Relu], 3)) {
        let mut balanced = net.clone();
        let prod = net.complexity_upper_bound(2.0).unwrap();
        balance_layers(&mut balanced, prod).unwrap();
        let (a, b) = (net.predict(x.view()).unwrap(), balanced.predict(x.view()).unwrap());
        for (u, v) in a.iter().zip(b.iter()) {
            prop_assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
        }
    }

    #[test]
    fn depth_sep_targets_are_lipschitz(x in vec_in(3, -1.5, 1.5), y in vec_in(3, -1.5, 1.5), eps0 in 0.05f64..0.95) {
        let l1: f64 = (&x - &y).iter().map(|v| v.abs()).sum();
        let l2 = norm(&(&x - &y));
        let p = (depth_sep_target(DepthSepKind::Pyramid, x.view(), eps0).unwrap() - depth_sep_target(DepthSepKind::Pyramid, y.view(), eps0).unwrap()).abs();
        prop_assert!(p <= l1 + 1e-12);
        let r = (depth_sep_target(DepthSepKind::RadialBump, x.view(), eps0).unwrap() - depth_sep_target(DepthSepKind::RadialBump, y.view(), eps0).unwrap()).abs();
        prop_assert!(r <= l2 / (1.0 - eps0) + 1e-12);
    }
}

/// Direct evaluation of the centered alignment with explicit centering
/// matrices, on random 5x5 PSD pairs.
#[test]
fn cka_matches_brute_force_definition() {
    use rand::Rng;
    let mut rng = nhl::seed::rng_from_seed(17);
    for _ in 0..20 {
        let mut gram = || {
            let b = Array2::from_shape_simple_fn((5, 5), || rng.random::<f64>() - 0.5);
            b.dot(&b.t())
        };
        let (k, s) = (gram(), gram());
        let h = Array2::<f64>::eye(5) - Array2::<f64>::from_elem((5, 5), 0.2);
        let kc = h.dot(&k).dot(&h);
        let sc = h.dot(&s).dot(&h);
        let inner: f64 = (&kc * &sc).sum();
        let expected = inner / ((&kc * &kc).sum().sqrt() * (&sc * &sc).sum().sqrt());
        let got = cka(&GramMatrix::new("k", k).unwrap(), &GramMatrix::new("s", s).unwrap()).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }
}
