use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::connectome::{pearson_fcn, FcnMatrix, RoiTimeSeries};
use crate::diffcore::{grad_check, softmax_rows};

fn random_fcn(rng: &mut ChaCha8Rng, r: usize) -> FcnMatrix<f64> {
    let t = 24;
    let ts = Tensor2D::from_fn(t, r, |_, _| rng.random_range(-1.0..1.0));
    pearson_fcn(&RoiTimeSeries::new(ts).unwrap()).unwrap().fcn
}

fn random_stack(rng: &mut ChaCha8Rng, scales: &[usize]) -> ScaleStack<f64> {
    ScaleStack::new(scales.iter().map(|&s| random_fcn(rng, s)).collect()).unwrap()
}

fn zero_stack(scales: &[usize]) -> ScaleStack<f64> {
    ScaleStack::new(
        scales
            .iter()
            .map(|&s| FcnMatrix::new(Tensor2D::zeros(s, s)).unwrap())
            .collect(),
    )
    .unwrap()
}

/// Random surjective fine→coarse assignment, one parent per fine node.
fn random_map(rng: &mut ChaCha8Rng, fine: usize, coarse: usize) -> MappingMatrix {
    let mut parent: Vec<usize> = (0..fine).map(|i| i % coarse).collect();
    parent.shuffle(rng);
    let mut e = vec![false; fine * coarse];
    for (i, &p) in parent.iter().enumerate() {
        e[i * coarse + p] = true;
    }
    // a few extra parents exercise multi-parent rows
    for _ in 0..2 {
        let i = rng.random_range(0..fine);
        e[i * coarse + rng.random_range(0..coarse)] = true;
    }
    MappingMatrix::from_binary(fine, coarse, 0.0, e).unwrap()
}

fn even_map(fine: usize, coarse: usize) -> MappingMatrix {
    let mut e = vec![false; fine * coarse];
    for i in 0..fine {
        e[i * coarse + i * coarse / fine] = true;
    }
    MappingMatrix::from_binary(fine, coarse, 0.0, e).unwrap()
}

fn maps_for(rng: &mut ChaCha8Rng, scales: &[usize]) -> Vec<MappingMatrix> {
    scales.windows(2).map(|w| random_map(rng, w[0], w[1])).collect()
}

fn config(variant: Variant, scales: &[usize]) -> ModelConfig {
    ModelConfig {
        scales: scales.to_vec(),
        variant,
        hidden_units: 6,
        degree_mode: DegreeMode::Absolute,
        ..ModelConfig::default()
    }
}

fn eval_forward(
    cfg: &ModelConfig,
    params: &MahgcnParams<f64>,
    stacks: &[ScaleStack<f64>],
    maps: &[MappingMatrix],
) -> BatchForward<f64> {
    let graphs: Vec<SampleGraphs<f64>> = stacks.iter().map(|s| SampleGraphs::prepare(cfg, s).unwrap()).collect();
    let refs: Vec<&SampleGraphs<f64>> = graphs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward_batch(cfg, params, &refs, maps, Mode::Eval, &mut rng).unwrap()
}

/// Straight-line dense `relu(S h θ)`.
fn dense_gcn(s: &Tensor2D<f64>, h: &Tensor2D<f64>, theta: &Tensor2D<f64>) -> Vec<f64> {
    let r = s.rows();
    let mut out = vec![0.0; r];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..r {
            for c in 0..h.cols() {
                acc += s.get(i, j) * h.get(j, c) * theta.get(c, 0);
            }
        }
        *o = acc.max(0.0);
    }
    out
}

fn run_gcn(s: &Tensor2D<f64>, h: &Tensor2D<f64>, theta: &Tensor2D<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let (sv, hv, tv) = (tape.constant(s.clone()), tape.constant(h.clone()), tape.param(theta.clone()));
    let out = gcn_forward(&mut tape, sv, hv, tv).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn gcn_forward_examples() {
    let s = normalize_adjacency(&Tensor2D::zeros(2, 2), DegreeMode::Raw).unwrap();
    let theta = Tensor2D::column(vec![2.0, 3.0]).unwrap();
    assert_eq!(run_gcn(&s, &Tensor2D::identity(2), &theta), vec![2.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = Tensor2D::from_fn(5, 5, |_, _| rng.random_range(0.0..1.0));
    let h = Tensor2D::from_fn(5, 3, |_, _| rng.random_range(0.0..1.0));
    let neg = Tensor2D::from_fn(3, 1, |_, _| -rng.random_range(0.1..1.0));
    assert!(run_gcn(&s, &h, &neg).iter().all(|&v| v == 0.0));
}

#[test]
fn gcn_forward_matches_dense_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = normalize_adjacency(random_fcn(&mut rng, 6).values(), DegreeMode::Absolute).unwrap();
    let h = Tensor2D::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    let theta = Tensor2D::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
    for (a, b) in run_gcn(&s, &h, &theta).iter().zip(dense_gcn(&s, &h, &theta)) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
}

#[test]
fn gcn_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor2D::identity(3));
    let h = tape.constant(Tensor2D::ones(2, 2));
    let t = tape.param(Tensor2D::ones(2, 1));
    assert!(matches!(gcn_forward(&mut tape, s, h, t), Err(Error::Shape(_))));
}

#[test]
fn full_scale_shapes() {
    let scales = [500, 400, 300, 200, 100];
    let stack = zero_stack(&scales);
    let maps: Vec<MappingMatrix> = scales.windows(2).map(|w| even_map(w[0], w[1])).collect();
    for variant in [Variant::Mahgcn, Variant::Magcn] {
        let cfg = ModelConfig {
            variant,
            ..ModelConfig::default()
        };
        let params = init_params::<f64>(&cfg, 1).unwrap();
        assert_eq!(params.fl1_w.shape(), (1500, 64));
        assert_eq!(params.fl2_w.shape(), (64, 2));
        // magcn never reads the mappings
        let maps = if variant == Variant::Magcn { &[][..] } else { &maps[..] };
        let out = eval_forward(&cfg, &params, std::slice::from_ref(&stack), maps);
        let tr = out.trace(0);
        assert_eq!(tr.fused.len(), 1500);
        assert_eq!(tr.logits.len(), 2);
    }
    let cfg = ModelConfig {
        variant: Variant::Gcn,
        ..ModelConfig::default()
    };
    let params = init_params::<f64>(&cfg, 1).unwrap();
    let tr = eval_forward(&cfg, &params, &[stack], &[]).trace(0);
    assert_eq!(tr.fused.len(), 500);
}

#[test]
fn config_guards() {
    let one = ModelConfig {
        scales: vec![100],
        ..ModelConfig::default()
    };
    assert!(matches!(one.validate(), Err(Error::Config(_))));
    let gcn = ModelConfig {
        variant: Variant::Gcn,
        ..one
    };
    assert!(gcn.validate().is_ok());
    for bad in [
        ModelConfig { th: 1.0, ..ModelConfig::default() },
        ModelConfig { scales: vec![100, 200], ..ModelConfig::default() },
        ModelConfig { hidden_units: 0, ..ModelConfig::default() },
        ModelConfig { num_classes: 3, ..ModelConfig::default() },
        ModelConfig { dropout_rate: 1.0, ..ModelConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn missing_maps_are_a_config_error() {
    let cfg = config(Variant::Mahgcn, &[12, 8, 4]);
    let params = init_params::<f64>(&cfg, 1).unwrap();
    let g = SampleGraphs::prepare(&cfg, &zero_stack(&[12, 8, 4])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = forward_batch(&cfg, &params, &[&g], &[even_map(12, 8)], Mode::Eval, &mut rng);
    assert!(matches!(r, Err(Error::Config(_))));
    let r = forward_batch(&cfg, &params, &[&g], &[even_map(12, 4), even_map(8, 4)], Mode::Eval, &mut rng);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn degenerate_degree_propagates() {
    let cfg = ModelConfig {
        degree_mode: DegreeMode::Raw,
        ..config(Variant::Gcn, &[3])
    };
    let a = Tensor2D::from_rows(&[vec![1.0, -1.0, -1.0], vec![-1.0, 1.0, 0.0], vec![-1.0, 0.0, 1.0]]).unwrap();
    let stack = ScaleStack::new(vec![FcnMatrix::new(a).unwrap()]).unwrap();
    assert!(matches!(
        SampleGraphs::prepare(&cfg, &stack),
        Err(Error::DegenerateDegree { node: 0, .. })
    ));
}

#[test]
fn zero_output_weights_give_even_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in [Variant::Mahgcn, Variant::Magcn, Variant::Gcn] {
        let cfg = config(variant, &[12, 8, 4]);
        let mut params = init_params::<f64>(&cfg, 5).unwrap();
        params.fl2_w = Tensor2D::zeros(6, 2);
        let stacks: Vec<_> = (0..3).map(|_| random_stack(&mut rng, &[12, 8, 4])).collect();
        let maps = maps_for(&mut rng, &[12, 8, 4]);
        let out = eval_forward(&cfg, &params, &stacks, &maps);
        assert!(out.tape.value(out.probs).data().iter().all(|&p| p == 0.5));
    }
}

#[test]
fn probabilities_are_softmax_of_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = config(Variant::Mahgcn, &[12, 8, 4]);
    let params = init_params::<f64>(&cfg, 2).unwrap();
    let stacks: Vec<_> = (0..4).map(|_| random_stack(&mut rng, &[12, 8, 4])).collect();
    let maps = maps_for(&mut rng, &[12, 8, 4]);
    let out = eval_forward(&cfg, &params, &stacks, &maps);
    let logits = out.tape.value(out.logits);
    let probs = out.tape.value(out.probs);
    assert_eq!(&softmax_rows(logits), probs);
    for b in 0..4 {
        let arg = |r: &[f64]| if r[1] > r[0] { 1 } else { 0 };
        assert_eq!(arg(logits.row(b)), arg(probs.row(b)));
        let total: f64 = probs.row(b).iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }
}

#[test]
fn eval_forward_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = ModelConfig {
        dropout_rate: 0.5,
        ..config(Variant::Mahgcn, &[12, 8, 4])
    };
    let params = init_params::<f64>(&cfg, 2).unwrap();
    let stacks: Vec<_> = (0..3).map(|_| random_stack(&mut rng, &[12, 8, 4])).collect();
    let maps = maps_for(&mut rng, &[12, 8, 4]);
    let a = eval_forward(&cfg, &params, &stacks, &maps);
    let b = eval_forward(&cfg, &params, &stacks, &maps);
    for k in 0..3 {
        assert_eq!(a.trace(k), b.trace(k));
        assert!(a.trace(k).h.iter().all(|h| h.data().iter().all(|&v| v >= 0.0)));
    }
    assert_eq!(a.bn_stats, params.bn_stats);
}

#[test]
fn single_gcn_on_zero_fcn_sees_relu_theta() {
    let cfg = config(Variant::Gcn, &[7]);
    let params = init_params::<f64>(&cfg, 9).unwrap();
    let tr = eval_forward(&cfg, &params, &[zero_stack(&[7])], &[]).trace(0);
    let want: Vec<f64> = params.thetas[0].data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(tr.fused, want);
}

#[test]
fn cross_variant_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let stacks: Vec<_> = (0..3).map(|_| random_stack(&mut rng, &[12, 8, 4])).collect();
    // gcn equals a single-scale magcn with the same parameters
    let gcn = config(Variant::Gcn, &[12, 8, 4]);
    let magcn = config(Variant::Magcn, &[12]);
    let params = init_params::<f64>(&gcn, 4).unwrap();
    let a = eval_forward(&gcn, &params, &stacks, &[]);
    let single: Vec<_> = stacks.iter().map(|s| s.select(&[12]).unwrap()).collect();
    let b = eval_forward(&magcn, &params, &single, &[]);
    for k in 0..3 {
        assert_eq!(a.trace(k), b.trace(k));
    }
    // and its GCN output is the finest-scale GCN output of mahgcn
    let mah = config(Variant::Mahgcn, &[12, 8, 4]);
    let mut mp = init_params::<f64>(&mah, 4).unwrap();
    mp.thetas[0] = params.thetas[0].clone();
    let maps = maps_for(&mut rng, &[12, 8, 4]);
    let c = eval_forward(&mah, &mp, &stacks, &maps);
    for k in 0..3 {
        assert_eq!(a.trace(k).h[0], c.trace(k).h[0]);
    }
}

#[test]
fn skip_connections_off_uses_coarsest_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = ModelConfig {
        skip_connections: false,
        ..config(Variant::Mahgcn, &[12, 8, 4])
    };
    let params = init_params::<f64>(&cfg, 3).unwrap();
    assert_eq!(params.fl1_w.shape(), (4, 6));
    let stacks = vec![random_stack(&mut rng, &[12, 8, 4])];
    let maps = maps_for(&mut rng, &[12, 8, 4]);
    let tr = eval_forward(&cfg, &params, &stacks, &maps).trace(0);
    assert_eq!(tr.fused, tr.h[2].data());
}

#[test]
fn magcn_is_invariant_to_consistent_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let scales = [12, 8, 4];
    let cfg = config(Variant::Magcn, &scales);
    let params = init_params::<f64>(&cfg, 8).unwrap();
    let stack = random_stack(&mut rng, &scales);
    let base = eval_forward(&cfg, &params, std::slice::from_ref(&stack), &[]).trace(0);

    // relabel the middle scale
    let mut perm: Vec<usize> = (0..8).collect();
    perm.shuffle(&mut rng);
    let mut fcns = stack.fcns().to_vec();
    fcns[1] = FcnMatrix::new(fcns[1].values().permute_symmetric(&perm)).unwrap();
    let permuted = ScaleStack::new(fcns).unwrap();
    let mut p2 = params.clone();
    p2.thetas[1] = params.thetas[1].permute_rows(&perm);
    let mut rows: Vec<usize> = (0..24).collect();
    for (i, &p) in perm.iter().enumerate() {
        rows[12 + i] = 12 + p;
    }
    p2.fl1_w = params.fl1_w.permute_rows(&rows);
    let moved = eval_forward(&cfg, &p2, &[permuted], &[]).trace(0);
    for (a, b) in base.logits.iter().zip(&moved.logits) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let cfg = config(Variant::Mahgcn, &[12, 8, 4]);
    let a = init_params::<f64>(&cfg, 77).unwrap();
    let b = init_params::<f64>(&cfg, 77).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params::<f64>(&cfg, 78).unwrap());
    assert_eq!(glorot_bound(64, 2), (6.0f64 / 66.0).sqrt());
    let full = init_params::<f64>(&ModelConfig::default(), 1).unwrap();
    let b2 = glorot_bound(64, 2);
    assert!(full.fl2_w.data().iter().all(|v| v.abs() <= b2));
    assert!(a.fl1_b.data().iter().all(|&v| v == 0.0));
    assert!(a.bn_gamma.data().iter().all(|&v| v == 1.0));
}

#[test]
fn init_variance_matches_uniform() {
    let cfg = ModelConfig {
        scales: vec![1600, 400],
        ..ModelConfig::default()
    };
    let p = init_params::<f64>(&cfg, 21).unwrap();
    let w = p.fl1_w.data();
    assert!(w.len() >= 100_000);
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let b = glorot_bound(2000, 64);
    assert!((var / (b * b / 3.0) - 1.0).abs() < 0.05, "{var}");
}

/// Loss of one train-mode batch with a fixed dropout stream.
fn batch_loss(
    cfg: &ModelConfig,
    params: &MahgcnParams<f64>,
    graphs: &[SampleGraphs<f64>],
    maps: &[MappingMatrix],
    labels: &[usize],
) -> (BatchForward<f64>, Var) {
    let refs: Vec<&SampleGraphs<f64>> = graphs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut out = forward_batch(cfg, params, &refs, maps, Mode::Train, &mut rng).unwrap();
    let loss = out
        .tape
        .weighted_cross_entropy(out.logits, labels, &[2.0, 2.0 / 3.0])
        .unwrap();
    (out, loss)
}

fn with_flat(params: &MahgcnParams<f64>, flat: &[f64]) -> MahgcnParams<f64> {
    let mut p = params.clone();
    let mut k = 0;
    for t in p.trainable_mut() {
        for v in t.data_mut() {
            *v = flat[k];
            k += 1;
        }
    }
    p
}

#[test]
fn loss_gradients_match_finite_differences() {
    let scales = [12, 8, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let labels = [0, 1, 1, 1];
    for variant in [Variant::Mahgcn, Variant::Magcn, Variant::Gcn] {
        for scheme in [PoolingScheme::Sum, PoolingScheme::Average, PoolingScheme::Max] {
            if variant != Variant::Mahgcn && scheme != PoolingScheme::Sum {
                continue;
            }
            let cfg = ModelConfig {
                pooling_scheme: scheme,
                ..config(variant, &scales)
            };
            let params = init_params::<f64>(&cfg, 31).unwrap();
            let graphs: Vec<_> = (0..4)
                .map(|_| SampleGraphs::prepare(&cfg, &random_stack(&mut rng, &scales)).unwrap())
                .collect();
            let maps = maps_for(&mut rng, &scales);
            let point: Vec<f64> = params.trainable().iter().flat_map(|t| t.data().to_vec()).collect();
            let err = grad_check(
                |x| {
                    let p = with_flat(&params, x);
                    let (out, loss) = batch_loss(&cfg, &p, &graphs, &maps, &labels);
                    let g = out.tape.backward(loss).unwrap();
                    let grad = out
                        .params
                        .all()
                        .iter()
                        .flat_map(|&v| g.wrt(v).into_data())
                        .collect();
                    Ok((out.tape.value(loss).get(0, 0), grad))
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "{variant} {scheme:?}: {err}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = config(Variant::Mahgcn, &[12, 8, 4]);
    let mut params = init_params::<f64>(&cfg, 40).unwrap();
    params.bn_stats.running_var = Tensor2D::filled(1, 6, 1.0 / 3.0);
    let ck = Checkpoint {
        config: cfg,
        params,
    };
    let text = ck.to_json();
    assert!(text.contains("\"gcn.0.theta\"") && text.contains("\"bn1.run_var\""));
    assert_eq!(Checkpoint::<f64>::from_json(&text).unwrap(), ck);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.write(&path).unwrap();
    assert_eq!(Checkpoint::<f64>::read(&path).unwrap(), ck);

    let broken = text.replace("\"fl2.b\"", "\"fl3.b\"");
    assert!(Checkpoint::<f64>::from_json(&broken).is_err());
}

proptest! {
    #[test]
    fn gcn_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..10) {
        // small dyadic entries keep every product and sum exact
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = |rng: &mut ChaCha8Rng| rng.random_range(-16i32..16) as f64 / 16.0;
        let mut s = Tensor2D::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dy(&mut rng);
                s.data_mut()[i * n + j] = v;
                s.data_mut()[j * n + i] = v;
            }
        }
        let h = Tensor2D::from_fn(n, 2, |_, _| dy(&mut rng));
        let theta = Tensor2D::from_fn(2, 1, |_, _| dy(&mut rng));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = run_gcn(&s, &h, &theta);
        let moved = run_gcn(&s.permute_symmetric(&perm), &h.permute_rows(&perm), &theta);
        for i in 0..n {
            prop_assert_eq!(moved[i], base[perm[i]]);
        }
    }

    #[test]
    fn gcn_permutation_within_rounding(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = normalize_adjacency(random_fcn(&mut rng, n).values(), DegreeMode::Absolute).unwrap();
        let h = Tensor2D::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let theta = Tensor2D::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = run_gcn(&s, &h, &theta);
        let moved = run_gcn(&s.permute_symmetric(&perm), &h.permute_rows(&perm), &theta);
        for i in 0..n {
            prop_assert!((moved[i] - base[perm[i]]).abs() <= 1e-14);
        }
    }
}
