//! Finite-difference oracles for the network module.

use proptest::prelude::*;
use rugosity_core::linalg::{spectral_norm_default, frobenius_norm, Matrix, Rng};
use rugosity_core::network::{ActivationKind, Network, PenaltyNorm};

fn activation(code: u8) -> ActivationKind {
    match code % 4 {
        0 => ActivationKind::Relu,
        1 => ActivationKind::LeakyRelu { slope: 0.2 },
        2 => ActivationKind::Abs,
        _ => ActivationKind::Tanh,
    }
}

fn random_net(seed: u64, widths: &[usize], act: ActivationKind) -> Network {
    Network::init(widths, act, &mut Rng::new(seed)).unwrap()
}

fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Visits every parameter as `(layer, is_bias, row, col)`.
fn parameters(net: &Network) -> Vec<(usize, bool, usize, usize)> {
    let mut out = Vec::new();
    for (l, layer) in net.layers().iter().enumerate() {
        for r in 0..layer.weights.rows() {
            for c in 0..layer.weights.cols() {
                out.push((l, false, r, c));
            }
            out.push((l, true, r, 0));
        }
    }
    out
}

fn perturbed(net: &Network, p: (usize, bool, usize, usize), h: f64) -> Network {
    let mut n = net.clone();
    let layer = &mut n.layers_mut()[p.0];
    if p.1 {
        layer.bias[p.2] += h;
    } else {
        let v = layer.weights.get(p.2, p.3);
        layer.weights.set(p.2, p.3, v + h);
    }
    n
}

#[test]
fn backprop_matches_central_differences() {
    let h = 1e-6;
    for seed in 0..8u64 {
        let net = random_net(seed, &[3, 7, 5, 2], activation(seed as u8));
        let mut rng = Rng::derive(seed, 9);
        let x = random_vec(3, &mut rng);
        let g = random_vec(2, &mut rng);
        let grad = net.backprop(&x, &g).unwrap();
        let objective = |n: &Network| -> f64 { n.eval(&x).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum() };
        for p in parameters(&net) {
            let (plus, minus) = (perturbed(&net, p, h), perturbed(&net, p, -h));
            if net.activation_pattern_changes(&plus, &x) || net.activation_pattern_changes(&minus, &x) {
                continue;
            }
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let lg = &grad.layers[p.0];
            let analytic = if p.1 { lg.bias[p.2] } else { lg.weights.get(p.2, p.3) };
            assert!((fd - analytic).abs() < 1e-6 * (1.0 + analytic.abs()), "seed {seed} param {p:?}: {fd} vs {analytic}");
        }
    }
}

#[test]
fn smooth_jacobian_matches_central_differences() {
    let h = 1e-6;
    for seed in 0..5u64 {
        let net = random_net(seed, &[4, 6, 3], ActivationKind::Tanh);
        let x = random_vec(4, &mut Rng::derive(seed, 1));
        let j = net.jacobian(&x).unwrap();
        for c in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let (fp, fm) = (net.eval(&xp).unwrap(), net.eval(&xm).unwrap());
            for k in 0..3 {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                assert!((fd - j.get(k, c)).abs() < 1e-7, "{fd} vs {}", j.get(k, c));
            }
        }
        for k in 0..3 {
            assert_eq!(net.gradient_wrt_input(&x, k).unwrap(), j.row(k).to_vec());
        }
    }
}

/// `‖A[x'] − A[x]‖` recomputed from scratch, for finite differences.
fn penalty_value(net: &Network, x: &[f64], shifted: &[f64], norm: PenaltyNorm) -> f64 {
    let a0 = net.affine_operator(x).unwrap().a;
    let a1 = net.affine_operator(shifted).unwrap().a;
    let diff = a1.sub(&a0).unwrap();
    match norm {
        PenaltyNorm::Spectral => spectral_norm_default(&diff).unwrap(),
        PenaltyNorm::Frobenius => frobenius_norm(&diff).unwrap(),
    }
}

#[test]
fn penalty_gradient_matches_frozen_pattern_differences() {
    let h = 1e-7;
    let mut checked = 0;
    for seed in 0..12u64 {
        let net = random_net(seed, &[2, 8, 8, 3], activation(seed as u8 % 3));
        let mut rng = Rng::derive(seed, 4);
        let x = random_vec(2, &mut rng);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.8 * rng.normal()).collect();
        for norm in [PenaltyNorm::Spectral, PenaltyNorm::Frobenius] {
            let (value, grad) = net.penalty_between(&x, &shifted, norm).unwrap();
            assert!((value - penalty_value(&net, &x, &shifted, norm)).abs() < 1e-12 * (1.0 + value));
            if value == 0.0 {
                continue;
            }
            for p in parameters(&net) {
                let (plus, minus) = (perturbed(&net, p, h), perturbed(&net, p, -h));
                let frozen = [&plus, &minus]
                    .iter()
                    .all(|n| !net.activation_pattern_changes(n, &x) && !net.activation_pattern_changes(n, &shifted));
                if !frozen {
                    continue;
                }
                let fd = (penalty_value(&plus, &x, &shifted, norm) - penalty_value(&minus, &x, &shifted, norm)) / (2.0 * h);
                let lg = &grad.layers[p.0];
                let analytic = if p.1 { lg.bias[p.2] } else { lg.weights.get(p.2, p.3) };
                if p.1 {
                    assert_eq!(analytic, 0.0);
                }
                assert!((fd - analytic).abs() < 2e-5 * (1.0 + analytic.abs()), "seed {seed} {norm:?} {p:?}: {fd} vs {analytic}");
                checked += 1;
            }
        }
    }
    assert!(checked > 500, "only {checked} parameters checked");
}

trait PatternProbe {
    fn activation_pattern_changes(&self, other: &Network, x: &[f64]) -> bool;
}

impl PatternProbe for Network {
    fn activation_pattern_changes(&self, other: &Network, x: &[f64]) -> bool {
        self.pattern(x).unwrap() != other.pattern(x).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_operator_reproduces_forward(seed in 0u64..10_000, act in 0u8..3, depth in 1usize..4, width in 1usize..20) {
        let mut widths = vec![3];
        widths.extend(std::iter::repeat(width).take(depth));
        widths.push(2);
        let net = random_net(seed, &widths, activation(act));
        let x = random_vec(3, &mut Rng::derive(seed, 2));
        let f = net.eval(&x).unwrap();
        let op = net.affine_operator(&x).unwrap();
        let g: Vec<f64> = op.a.matvec(&x).iter().zip(&op.b).map(|(a, b)| a + b).collect();
        for (a, b) in f.iter().zip(&g) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
        prop_assert_eq!(net.jacobian(&x).unwrap(), op.a);
    }

    #[test]
    fn output_scaling_is_homogeneous(seed in 0u64..10_000, alpha in 0.01f64..100.0) {
        let net = random_net(seed, &[2, 9, 9, 3], ActivationKind::Relu);
        let x = random_vec(2, &mut Rng::derive(seed, 3));
        let f = net.eval(&x).unwrap();
        let g = net.scaled_output(alpha).eval(&x).unwrap();
        for (a, b) in f.iter().zip(&g) {
            prop_assert!((alpha * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn text_format_round_trips(seed in 0u64..10_000, act in 0u8..4) {
        let net = random_net(seed, &[4, 5, 2], activation(act));
        let back = Network::from_text(&net.to_text()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn penalty_is_zero_within_a_region(seed in 0u64..10_000) {
        let net = random_net(seed, &[2, 6, 2], ActivationKind::Relu);
        let x = random_vec(2, &mut Rng::derive(seed, 5));
        let (value, grad) = net.penalty_between(&x, &x, PenaltyNorm::Spectral).unwrap();
        prop_assert_eq!(value, 0.0);
        prop_assert!(grad.is_zero());
    }
}

#[test]
fn saved_network_reloads_identically() {
    let net = random_net(3, &[3, 4, 2], ActivationKind::LeakyRelu { slope: 0.05 });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.txt");
    net.save(&path).unwrap();
    assert_eq!(Network::load(&path).unwrap(), net);
    let zero = Matrix::zeros(2, 2);
    assert_eq!(frobenius_norm(&zero).unwrap(), 0.0);
}
