use lieq_core::allocator::{
    assign_bits, compression_ratio, compression_ratio_for, effectiveness_score, normalize_metrics, plan_from_scores,
    select_topk,
};
use lieq_core::{ArchConfig, BitPlan, Error, NormalizedMetrics, ScoreWeights};
use proptest::prelude::*;

fn equal_layers(n: usize) -> Vec<u64> {
    vec![1000; n]
}

#[test]
fn normalization_examples() {
    let m = normalize_metrics(&[2.0, 4.0], &[-0.3, 0.6], &[0.1, -0.2]).unwrap();
    assert_eq!(m.delta_ppl, vec![0.5, 1.0]);
    assert_eq!(m.delta_r, vec![0.5, 1.0]);
    assert_eq!(m.delta_e, vec![1.0, 0.0]);
    assert_eq!(
        normalize_metrics(&[-1.0, -2.0], &[1.0, 1.0], &[1.0, 1.0]),
        Err(Error::DegenerateMetric("delta_ppl"))
    );
    assert_eq!(normalize_metrics(&[1.0], &[0.0], &[1.0]), Err(Error::DegenerateMetric("delta_r")));
    assert!(matches!(normalize_metrics(&[1.0, 2.0], &[1.0], &[1.0, 1.0]), Err(Error::LengthMismatch { .. })));
}

#[test]
fn score_examples() {
    let third = ScoreWeights::default();
    let one = NormalizedMetrics { delta_ppl: vec![1.0], delta_r: vec![1.0], delta_e: vec![1.0] };
    assert!((effectiveness_score(&one, &third).unwrap()[0] - 1.0).abs() < 1e-15);
    assert!((effectiveness_score(&one, &ScoreWeights::new(0.2, 0.3, 0.5).unwrap()).unwrap()[0] - 1.0).abs() < 1e-15);
    let mixed = NormalizedMetrics { delta_ppl: vec![0.5, 0.3], delta_r: vec![0.0, 1.0], delta_e: vec![1.0, 0.2] };
    assert!((effectiveness_score(&mixed, &third).unwrap()[0] - 0.5).abs() < 1e-15);
    let proj = effectiveness_score(&mixed, &ScoreWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
    assert_eq!(proj, mixed.delta_ppl);
    assert_eq!(ScoreWeights::new(0.5, 0.5, 0.5), Err(Error::WeightSumInvalid));
    assert_eq!(ScoreWeights::new(1.5, -0.5, 0.0), Err(Error::WeightSumInvalid));
}

#[test]
fn selection_examples() {
    assert_eq!(select_topk(&[0.2, 0.9, 0.5], 1).unwrap().s_hi, vec![1]);
    assert_eq!(select_topk(&[0.5, 0.5, 0.1], 1).unwrap().s_hi, vec![0]);
    let none = select_topk(&[0.5, 0.5, 0.1], 0).unwrap();
    assert!(none.s_hi.is_empty());
    assert_eq!(none.s_lo, vec![0, 1, 2]);
    assert_eq!(select_topk(&[0.1], 2), Err(Error::MOutOfRange { m: 2, n_layers: 1 }));
}

#[test]
fn bit_assignment_examples() {
    let mut scores = vec![0.1; 36];
    scores[17] = 0.8;
    let plan = plan_from_scores(&scores, 1, 4, 2).unwrap();
    assert_eq!(plan.bits.iter().filter(|&&b| b == 4).count(), 1);
    assert_eq!(plan.bits.iter().filter(|&&b| b == 2).count(), 35);
    assert_eq!(plan.bits[17], 4);
    plan.validate().unwrap();
    assert!(plan_from_scores(&scores, 1, 3, 2).is_ok());
    let part = select_topk(&scores, 1).unwrap();
    assert_eq!(assign_bits(&part, &scores, 2, 2), Err(Error::UnsupportedBitWidth(2)));
    assert_eq!(assign_bits(&part, &scores, 5, 2), Err(Error::UnsupportedBitWidth(5)));
}

#[test]
fn compression_examples() {
    let plan36 = plan_from_scores(&(0..36).map(|i| i as f64).collect::<Vec<_>>(), 1, 4, 2).unwrap();
    let r = compression_ratio_for(&plan36, &equal_layers(36), 0).unwrap();
    assert_eq!(r.avg_bits, 74.0 / 36.0);
    assert_eq!((r.avg_bits * 100.0).floor(), 205.0);
    let plan28 = plan_from_scores(&vec![0.0; 28], 1, 4, 2).unwrap();
    let r = compression_ratio_for(&plan28, &equal_layers(28), 0).unwrap();
    assert_eq!(r.avg_bits, 58.0 / 28.0);
    assert_eq!((r.avg_bits * 100.0).floor(), 207.0);
    let all2 = BitPlan::uniform(4, 2).unwrap();
    let arch = ArchConfig {
        n_layers: 4,
        d_model: 64,
        n_heads: 4,
        d_head: 16,
        d_ff: 128,
        vocab_size: 256,
        max_seq_len: 64,
        norm_eps: 1e-6,
    };
    let r = compression_ratio(&all2, &arch).unwrap();
    assert_eq!(r.cr, 0.125);
    assert_eq!(r.avg_bits, 16.0 * r.cr);
    assert!(r.whole_model_avg_bits > r.avg_bits);
    assert!(matches!(compression_ratio(&BitPlan::uniform(3, 2).unwrap(), &arch), Err(Error::PlanLengthMismatch { .. })));
}

fn triplet(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = move || prop::collection::vec(0.01f64..10.0, n);
    (v(), prop::collection::vec(-1.0f64..1.0, n).prop_filter("nonzero", |x| x.iter().any(|v| v.abs() > 1e-3)), v())
}

proptest! {
    #[test]
    fn scaling_a_metric_changes_nothing((p, r, e) in (2usize..12).prop_flat_map(triplet), c in 0.01f64..100.0, which in 0usize..3, m in 0usize..3) {
        let base = normalize_metrics(&p, &r, &e).unwrap();
        let scale = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let scaled = match which {
            0 => normalize_metrics(&scale(&p), &r, &e),
            1 => normalize_metrics(&p, &scale(&r), &e),
            _ => normalize_metrics(&p, &r, &scale(&e)),
        }.unwrap();
        let w = ScoreWeights::default();
        let (s0, s1) = (effectiveness_score(&base, &w).unwrap(), effectiveness_score(&scaled, &w).unwrap());
        for i in 0..p.len() {
            prop_assert!((s0[i] - s1[i]).abs() < 1e-12);
        }
        let m = m.min(p.len());
        prop_assert_eq!(select_topk(&s0, m).unwrap(), select_topk(&s1, m).unwrap());
    }

    #[test]
    fn scores_bounded_and_partition_ordered((p, r, e) in (1usize..12).prop_flat_map(triplet), m in 0usize..12, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (a, b) = (a.min(1.0 - 1e-9), b * (1.0 - a.min(1.0 - 1e-9)));
        let w = ScoreWeights::new(a, b, 1.0 - a - b).unwrap();
        let n = normalize_metrics(&p, &r, &e).unwrap();
        for v in [&n.delta_ppl, &n.delta_r, &n.delta_e] {
            prop_assert!(v.contains(&1.0));
        }
        let s = effectiveness_score(&n, &w).unwrap();
        prop_assert!(s.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
        let m = m.min(s.len());
        let part = select_topk(&s, m).unwrap();
        prop_assert_eq!(part.s_hi.len(), m);
        if let (Some(lo_hi), Some(hi_lo)) = (
            part.s_hi.iter().map(|&i| s[i]).reduce(f64::min),
            part.s_lo.iter().map(|&i| s[i]).reduce(f64::max),
        ) {
            prop_assert!(lo_hi >= hi_lo);
        }
    }

    #[test]
    fn compression_grows_with_m(n in 1usize..40, hi_idx in 0usize..3) {
        let (b_hi, b_lo) = [(4u8, 2u8), (3, 2), (8, 4)][hi_idx];
        let scores: Vec<f64> = (0..n).map(|i| (i * 7 % 5) as f64).collect();
        let mut prev = None;
        for m in 0..=n {
            let plan = plan_from_scores(&scores, m, b_hi, b_lo).unwrap();
            let r = compression_ratio_for(&plan, &equal_layers(n), 10).unwrap();
            prop_assert_eq!(r.avg_bits, 16.0 * r.cr);
            if let Some(p) = prev {
                prop_assert!(r.cr > p);
            }
            prev = Some(r.cr);
        }
    }
}
