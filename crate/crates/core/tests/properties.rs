//! Property tests for loss, attention and retrieval invariants.

use candle_core::{DType, Tensor, Var};
use proptest::prelude::*;
use rand::Rng as _;

use ppssl::ais::{ais_loss, attention_map};
use ppssl::backbone::{EncoderSpec, Tower};
use ppssl::contrastive::{info_nce, EmbeddingQueue};
use ppssl::data::{render_sample, SyntheticSpec};
use ppssl::eval::{retrieval_eval, FeatureSet};
use ppssl::rng::{rng_for, Rng};
use ppssl::tensor::{from_f64, normal, scalar, to_f64_vec};

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    while out.len() < n * d {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            out.extend(v.iter().map(|x| x / norm));
        }
    }
    out
}

fn t64(data: Vec<f64>, shape: &[usize]) -> Tensor {
    from_f64(data, shape.to_vec(), DType::F64).unwrap()
}

fn queue_of(rows: &[f64], cap: usize, d: usize) -> EmbeddingQueue {
    let mut q = EmbeddingQueue::new(cap, d).unwrap();
    let n = rows.len() / d;
    if n > 0 {
        q.push(&t64(rows.to_vec(), &[n, d])).unwrap();
    }
    q
}

/// Random orthogonal matrix by Gram–Schmidt, row-major.
fn rotation(rng: &mut Rng, d: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            rows.push(v.iter().map(|x| x / n).collect());
        }
    }
    rows.concat()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_ignores_queue_order(seed in any::<u64>(), b in 1usize..6, d in 2usize..8, fill in 1usize..20) {
        let mut rng = rng_for(seed, &[]);
        let q = t64(unit_rows(&mut rng, b, d), &[b, d]);
        let k = t64(unit_rows(&mut rng, b, d), &[b, d]);
        let negs = unit_rows(&mut rng, fill, d);
        let mut perm: Vec<usize> = (0..fill).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| negs[i * d..(i + 1) * d].to_vec()).collect();
        let a = scalar(&info_nce(&q, &k, &queue_of(&negs, 32, d), 0.2).unwrap()).unwrap();
        let c = scalar(&info_nce(&q, &k, &queue_of(&shuffled, 32, d), 0.2).unwrap()).unwrap();
        prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn info_nce_falls_as_positive_aligns(seed in any::<u64>(), fill in 1usize..16) {
        // q = [1, 0, 0]; k_pos rotates from orthogonal toward q.
        let mut rng = rng_for(seed, &[]);
        let queue = queue_of(&unit_rows(&mut rng, fill, 3), 32, 3);
        let q = t64(vec![1.0, 0.0, 0.0], &[1, 3]);
        let mut last = f64::INFINITY;
        for i in 0..=10 {
            let theta = std::f64::consts::FRAC_PI_2 * (1.0 - i as f64 / 10.0);
            let k = t64(vec![theta.cos(), theta.sin(), 0.0], &[1, 3]);
            let l = scalar(&info_nce(&q, &k, &queue, 0.5).unwrap()).unwrap();
            prop_assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn info_nce_gradient_matches_central_differences(seed in any::<u64>(), b in 1usize..4, d in 2usize..6, fill in 0usize..10) {
        let mut rng = rng_for(seed, &[]);
        let qv = unit_rows(&mut rng, b, d);
        let k = t64(unit_rows(&mut rng, b, d), &[b, d]);
        let queue = queue_of(&unit_rows(&mut rng, fill, d), 16, d);
        let tau = 0.3;
        let var = Var::from_tensor(&t64(qv.clone(), &[b, d])).unwrap();
        let grads = info_nce(var.as_tensor(), &k, &queue, tau).unwrap().backward().unwrap();
        let ad = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
        let f = |v: Vec<f64>| scalar(&info_nce(&t64(v, &[b, d]), &k, &queue, tau).unwrap()).unwrap();
        let h = 1e-6;
        let scale = ad.iter().map(|g| g.abs()).fold(0.0, f64::max).max(1e-8);
        for i in 0..qv.len() {
            let (mut p, mut m) = (qv.clone(), qv.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(p) - f(m)) / (2.0 * h);
            prop_assert!((fd - ad[i]).abs() <= 1e-4 * scale, "entry {i}: fd {fd} ad {}", ad[i]);
        }
    }

    #[test]
    fn ais_loss_is_non_negative_and_zero_for_shifted_logits(seed in any::<u64>(), b in 1usize..4, n in 2usize..9, tau in 0.3f64..4.0) {
        let mut rng = rng_for(seed, &[]);
        let lt: Vec<f64> = (0..b * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ls: Vec<f64> = (0..b * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let l = scalar(&ais_loss(&t64(lt.clone(), &[b, n]), &t64(ls, &[b, n]), tau).unwrap()).unwrap();
        prop_assert!(l >= -1e-12);
        let shift = rng.random_range(-3.0..3.0);
        let shifted: Vec<f64> = lt.iter().map(|x| x + shift).collect();
        let z = scalar(&ais_loss(&t64(lt, &[b, n]), &t64(shifted, &[b, n]), tau).unwrap()).unwrap();
        prop_assert!(z.abs() <= 1e-12);
    }

    #[test]
    fn ais_gradient_matches_central_differences(seed in any::<u64>(), n in 2usize..9, tau in 0.5f64..3.0) {
        let mut rng = rng_for(seed, &[]);
        let lt = t64((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), &[1, n]);
        let ls: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var = Var::from_tensor(&t64(ls.clone(), &[1, n])).unwrap();
        let grads = ais_loss(&lt, var.as_tensor(), tau).unwrap().backward().unwrap();
        let ad = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
        prop_assert!(grads.get(&lt).is_none());
        let f = |v: Vec<f64>| scalar(&ais_loss(&lt, &t64(v, &[1, n]), tau).unwrap()).unwrap();
        let h = 1e-6;
        let scale = ad.iter().map(|g| g.abs()).fold(0.0, f64::max).max(1e-8);
        for i in 0..n {
            let (mut p, mut m) = (ls.clone(), ls.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(p) - f(m)) / (2.0 * h);
            prop_assert!((fd - ad[i]).abs() <= 1e-4 * scale);
        }
    }

    #[test]
    fn attention_stays_in_unit_interval(seed in any::<u64>(), c in 1usize..5, h in 1usize..6, w in 1usize..6, scale in -6i32..6) {
        let mut rng = rng_for(seed, &[]);
        let s = 10f64.powi(scale);
        let x = t64((0..c * h * w).map(|_| s * rng.random_range(-1.0..1.0)).collect(), &[1, c, h, w]);
        let z = to_f64_vec(&attention_map(&x).unwrap()).unwrap();
        prop_assert!(z.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn map_is_rotation_invariant(seed in any::<u64>(), m in 2usize..30, d in 2usize..8) {
        let mut rng = rng_for(seed, &[]);
        let feats = unit_rows(&mut rng, m, d);
        let mut labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let r = rotation(&mut rng, d);
        let rotated: Vec<f64> = feats
            .chunks(d)
            .flat_map(|row| (0..d).map(|i| (0..d).map(|j| r[i * d + j] * row[j]).sum::<f64>()).collect::<Vec<_>>())
            .collect();
        let a = retrieval_eval(&FeatureSet::new(d, feats, labels.clone(), (0..m).collect()).unwrap()).unwrap();
        let b = retrieval_eval(&FeatureSet::new(d, rotated, labels, (0..m).collect()).unwrap()).unwrap();
        prop_assert!((a.map - b.map).abs() <= 1e-9);
        prop_assert!(a.rank1 <= a.rank5 && a.rank5 <= 100.0);
    }

    #[test]
    fn projections_are_unit_norm(seed in 0u64..1000, scale in -3i32..3) {
        let mut rng = rng_for(seed, &[]);
        let tower = Tower::new(&EncoderSpec::tiny(4, true), 16, 8, &mut rng, DType::F64).unwrap();
        let x = normal(&[3, 3, 16, 16], 10f64.powi(scale), &mut rng, DType::F64).unwrap();
        let (_, q) = tower.embed(&x, true).unwrap();
        for row in to_f64_vec(&q).unwrap().chunks(8) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_render_is_pure(seed in any::<u64>(), class in 0usize..4, index in 0usize..20) {
        let spec = SyntheticSpec { num_classes: 4, per_class: 20, canvas: 32, seed, ..SyntheticSpec::default() };
        let (a, ma) = render_sample(&spec, class, index);
        let (b, mb) = render_sample(&spec, class, index);
        prop_assert_eq!(a.as_raw(), b.as_raw());
        prop_assert_eq!(ma, mb);
    }
}
