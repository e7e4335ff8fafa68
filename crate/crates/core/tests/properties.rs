use proptest::collection::vec;
use proptest::prelude::*;
use semcrc::anchor::{solve_anchor, subsample, AnchorProblem, AnchorRow, AnchorSettings};
use semcrc::calibrate::{calibrate_kcrc, calibrate_scalar, calibrate_semcrc, calibrate_sembar, CalibrationResult};
use semcrc::losses::{
    loss01, loss01_per_organ, loss_gamma, mean_interval_length, residual, GroupWeights, LambdaMode, LambdaVector,
    WeightKind,
};
use semcrc::partition::{build_loss_quantile_partition, memberships, PartitionSpec};
use semcrc::synth::{generate, PhantomConfig};
use semcrc::tensor_io::{
    load_tensor, save_tensor, split, CalibrationSample, ImageTensor, QuantilePair, SampleSet, SegmentationMap,
    SplitPlan,
};

type Voxel = (f32, f32, f32, u16);

fn build_sample(id: usize, voxels: &[Voxel], k: usize) -> CalibrationSample {
    let d = voxels.len();
    let shape = vec![d];
    let x = voxels.iter().map(|v| v.0).collect();
    let lo = voxels.iter().map(|v| v.1 - v.2).collect();
    let hi = voxels.iter().map(|v| v.1 + v.2).collect();
    let labels = voxels.iter().map(|v| v.3 % k as u16).collect();
    CalibrationSample::new(
        format!("p{id}"),
        ImageTensor::new(shape.clone(), x).unwrap(),
        QuantilePair::new(
            ImageTensor::new(shape.clone(), lo).unwrap(),
            ImageTensor::new(shape.clone(), hi).unwrap(),
            0.1,
        )
        .unwrap(),
        SegmentationMap::new(shape, labels, k).unwrap(),
    )
    .unwrap()
}

fn voxel() -> impl Strategy<Value = Voxel> {
    (0f32..=1.0, 0f32..=1.0, -0.05f32..0.2, 0u16..8)
}

/// One sample with `k` classes and its λ vector.
fn sample_and_lambda() -> impl Strategy<Value = (CalibrationSample, usize, Vec<f64>)> {
    (1usize..=4, 1usize..40).prop_flat_map(|(k, d)| {
        (vec(voxel(), d), vec(0f64..0.4, k)).prop_map(move |(v, lam)| (build_sample(0, &v, k), k, lam))
    })
}

/// A set of `n` equal-length samples sharing `k` classes.
fn sample_set(max_n: usize) -> impl Strategy<Value = SampleSet> {
    (1usize..=3, 1usize..=max_n, 1usize..30).prop_flat_map(|(k, n, d)| {
        vec(vec(voxel(), d), n).prop_map(move |rows| {
            let samples = rows.iter().enumerate().map(|(i, v)| build_sample(i, v, k)).collect();
            SampleSet::new(samples, k, None).unwrap()
        })
    })
}

fn sem(v: &[f64]) -> LambdaVector {
    LambdaVector::new(v.to_vec(), LambdaMode::Semantic).unwrap()
}

/// Adjusted risk from direct interval membership with per-voxel λ.
fn oracle_adjusted(set: &SampleSet, lam: &[f64], part: &PartitionSpec) -> f64 {
    let n = set.len() as f64;
    let total: f64 = set
        .samples()
        .iter()
        .map(|s| {
            let groups = memberships(s, part).unwrap();
            let (x, lo, hi) = (s.x.values(), s.q.lo.values(), s.q.hi.values());
            let out = (0..x.len())
                .filter(|&j| {
                    let l = lam[groups[j] as usize];
                    !(lo[j] as f64 - l <= x[j] as f64 && x[j] as f64 <= hi[j] as f64 + l)
                })
                .count();
            out as f64 / x.len() as f64
        })
        .sum();
    (total + 1.0) / (n + 1.0)
}

fn shifted(anchor: &[f64], omega: f64) -> Vec<f64> {
    anchor.iter().map(|a| (a + omega).max(0.0)).collect()
}

fn feasible_eps(n: usize, t: f64) -> f64 {
    let floor = 1.0 / (n as f64 + 1.0);
    floor + t * (0.9 - floor)
}

fn assert_trace_monotone(r: &CalibrationResult) {
    for pair in r.trace.windows(2) {
        assert!(pair[0].param <= pair[1].param);
        assert!(pair[1].adjusted_risk <= pair[0].adjusted_risk + 1e-12, "{:?}", r.trace);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    // ---- losses

    #[test]
    fn threshold_equivalence(x in 0f32..=1.0, lo in -0.5f32..1.5, w in -0.3f32..0.6, lam in 0f64..0.5) {
        let (x, lo, hi) = (x as f64, lo as f64, (lo + w) as f64);
        let outside = !(lo - lam <= x && x <= hi + lam);
        prop_assert_eq!(outside, residual(x, lo, hi) > lam);
    }

    #[test]
    fn losses_monotone_in_each_lambda((s, k, lam) in sample_and_lambda(), g in 0usize..4, bump in 0f64..0.3, gamma in 0.01f64..0.99) {
        let part = PartitionSpec::Semantic { k };
        let mut up = lam.clone();
        up[g % k] += bump;
        prop_assert!(loss01(&s, &sem(&up), &part).unwrap() <= loss01(&s, &sem(&lam), &part).unwrap());
        prop_assert!(loss_gamma(&s, &sem(&up), &part, gamma).unwrap() <= loss_gamma(&s, &sem(&lam), &part, gamma).unwrap() + 1e-12);
    }

    #[test]
    fn surrogate_dominates_miscoverage((s, k, lam) in sample_and_lambda(), gamma in 0.001f64..0.999) {
        let part = PartitionSpec::Semantic { k };
        prop_assert!(loss_gamma(&s, &sem(&lam), &part, gamma).unwrap() >= loss01(&s, &sem(&lam), &part).unwrap());
    }

    #[test]
    fn surrogate_convex((s, k, l1) in sample_and_lambda(), l2 in vec(0f64..0.4, 4), t in 0f64..=1.0, gamma in 0.01f64..0.99) {
        let part = PartitionSpec::Semantic { k };
        let l2 = &l2[..k];
        let mix: Vec<f64> = l1.iter().zip(l2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let f = |l: &[f64]| loss_gamma(&s, &sem(l), &part, gamma).unwrap();
        prop_assert!(f(&mix) <= t * f(&l1) + (1.0 - t) * f(l2) + 1e-12);
    }

    #[test]
    fn length_affine_in_each_lambda((s, k, lam) in sample_and_lambda(), g in 0usize..4, delta in 0f64..0.2) {
        let part = PartitionSpec::Semantic { k };
        let g = g % k;
        let mut up = lam.clone();
        up[g] += delta;
        let diff = mean_interval_length(&s, &sem(&up), &part).unwrap() - mean_interval_length(&s, &sem(&lam), &part).unwrap();
        let size = s.seg.class_counts()[g] as f64;
        let slope = 2.0 * size / s.dim() as f64 * delta;
        let (lo, hi, labels) = (s.q.lo.values(), s.q.hi.values(), s.seg.labels());
        let floored = (0..s.dim()).any(|j| labels[j] as usize == g && (hi[j] - lo[j]) as f64 + 2.0 * lam[g] < 0.0);
        if floored {
            prop_assert!(diff <= slope + 1e-12);
        } else {
            prop_assert!((diff - slope).abs() < 1e-12);
        }
    }

    #[test]
    fn organ_losses_aggregate((s, k, lam) in sample_and_lambda()) {
        let total = loss01(&s, &sem(&lam), &PartitionSpec::Semantic { k }).unwrap();
        let sizes = s.seg.class_counts();
        let agg: f64 = loss01_per_organ(&s, &sem(&lam)).unwrap().iter().zip(&sizes)
            .filter_map(|(r, &n)| r.map(|r| r * n as f64 / s.dim() as f64))
            .sum();
        prop_assert!((agg - total).abs() < 1e-12);
    }

    // ---- partition

    #[test]
    fn loss_quantile_bins_equal_mass(set in sample_set(4), k in 1usize..6) {
        let d = set.samples()[0].dim();
        prop_assume!(k <= d);
        let part = build_loss_quantile_partition(&set, k, 0.0).unwrap();
        let sizes = part.group_sizes().unwrap();
        prop_assert_eq!(sizes.iter().sum::<usize>(), d);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn loss_quantile_partition_ignores_sample_order(set in sample_set(5), k in 1usize..5, rot in 0usize..5) {
        prop_assume!(k <= set.samples()[0].dim());
        let mut samples = set.samples().to_vec();
        let n = samples.len();
        samples.rotate_left(rot % n);
        samples.reverse();
        let permuted = SampleSet::new(samples, set.k_classes(), None).unwrap();
        prop_assert_eq!(
            build_loss_quantile_partition(&set, k, 0.0).unwrap(),
            build_loss_quantile_partition(&permuted, k, 0.0).unwrap()
        );
    }

    #[test]
    fn semantic_memberships_pass_labels_through((s, k, _) in sample_and_lambda()) {
        prop_assert_eq!(memberships(&s, &PartitionSpec::Semantic { k }).unwrap(), s.seg.labels().to_vec());
    }

    // ---- anchor

    #[test]
    fn anchor_feasible_and_zero_weight_groups_stay_at_zero(
        rows in vec((-0.3f64..0.5, 0usize..3, 0.1f64..1.0), 1..120),
        raw_w in vec(0f64..1.0, 3),
        zero in 0usize..3,
        eps in 0.02f64..0.6,
        gamma in 0.02f64..0.3,
    ) {
        // A zero-weight group with rows may inflate for free; only a group
        // with neither weight nor rows is pinned at zero.
        let rows: Vec<_> = rows.into_iter().filter(|r| r.1 != zero).collect();
        prop_assume!(!rows.is_empty());
        let total: f64 = rows.iter().map(|r| r.2).sum();
        let rows: Vec<AnchorRow> = rows.iter().map(|&(r, g, w)| AnchorRow { residual: r, group: g, weight: w / total }).collect();
        let mut counts = raw_w.clone();
        counts[zero] = 0.0;
        let p = AnchorProblem::new(rows, GroupWeights { counts, kind: WeightKind::GroupSize }, eps, gamma, LambdaMode::FixedPartition).unwrap();
        let sol = solve_anchor(&p).unwrap();
        prop_assert!(p.surrogate(sol.lambda_tilde.values()) <= eps + 1e-6);
        prop_assert!(sol.feasible);
        for (w, l) in p.weights.counts.iter().zip(sol.lambda_tilde.values()) {
            if *w == 0.0 {
                prop_assert_eq!(*l, 0.0);
            }
        }
    }

    #[test]
    fn anchor_invariant_to_weight_scale(
        rows in vec((-0.3f64..0.5, 0usize..3), 1..120),
        w in vec(0.05f64..1.0, 3),
        scale in 0.01f64..100.0,
        eps in 0.02f64..0.6,
    ) {
        let n = rows.len() as f64;
        let rows: Vec<AnchorRow> = rows.iter().map(|&(r, g)| AnchorRow { residual: r, group: g, weight: 1.0 / n }).collect();
        let make = |c: Vec<f64>| AnchorProblem::new(rows.clone(), GroupWeights { counts: c, kind: WeightKind::GroupSize }, eps, 0.1, LambdaMode::FixedPartition).unwrap();
        let a = solve_anchor(&make(w.clone())).unwrap();
        let b = solve_anchor(&make(w.iter().map(|x| x * scale).collect())).unwrap();
        let pa = make(w.clone());
        prop_assert!((pa.objective(a.lambda_tilde.values()) - pa.objective(b.lambda_tilde.values())).abs() < 1e-9);
    }

    // ---- calibrate

    #[test]
    fn scalar_calibration_is_valid_sharp_and_nested(set in sample_set(6), t1 in 0f64..1.0, t2 in 0f64..1.0) {
        let n = set.len();
        let (e1, e2) = (feasible_eps(n, t1.min(t2)), feasible_eps(n, t1.max(t2)));
        let r1 = calibrate_scalar(&set, e1).unwrap();
        let r2 = calibrate_scalar(&set, e2).unwrap();
        let l1 = r1.lambda_hat.values()[0];
        prop_assert!(oracle_adjusted(&set, &[l1], &PartitionSpec::Scalar) <= e1 + 1e-9);
        if l1 > 1e-4 {
            prop_assert!(oracle_adjusted(&set, &[l1 - 1e-4], &PartitionSpec::Scalar) > e1);
        }
        prop_assert!(l1 >= r2.lambda_hat.values()[0]);
        assert_trace_monotone(&r1);
    }

    #[test]
    fn semantic_calibration_is_valid_sharp_and_nested(set in sample_set(6), anchor in vec(0f64..0.3, 3), t1 in 0f64..1.0, t2 in 0f64..1.0) {
        let n = set.len();
        let k = set.k_classes();
        let part = PartitionSpec::Semantic { k };
        let anchor = sem(&anchor[..k]);
        let (e1, e2) = (feasible_eps(n, t1.min(t2)), feasible_eps(n, t1.max(t2)));
        let r1 = calibrate_semcrc(&set, &anchor, e1).unwrap();
        let r2 = calibrate_semcrc(&set, &anchor, e2).unwrap();
        prop_assert!(oracle_adjusted(&set, r1.lambda_hat.values(), &part) <= e1 + 1e-9);
        let omega = r1.omega_hat.unwrap();
        let top = anchor.values().iter().cloned().fold(0.0, f64::max);
        if omega - 1e-4 > -top {
            prop_assert!(oracle_adjusted(&set, &shifted(anchor.values(), omega - 1e-4), &part) > e1);
        }
        for (a, b) in r1.lambda_hat.values().iter().zip(r2.lambda_hat.values()) {
            prop_assert!(a >= b);
        }
        assert_trace_monotone(&r1);
    }

    #[test]
    fn kcrc_calibration_is_valid(set in sample_set(6), anchor in vec(0f64..0.3, 2), t in 0f64..1.0) {
        let d = set.samples()[0].dim();
        prop_assume!(d >= 2);
        let map = (0..d).map(|j| (j % 2) as u16).collect();
        let part = PartitionSpec::fixed(2, vec![d], map).unwrap();
        let eps = feasible_eps(set.len(), t);
        let r = calibrate_kcrc(&set, &part, &LambdaVector::new(anchor, LambdaMode::FixedPartition).unwrap(), eps).unwrap();
        prop_assert!(oracle_adjusted(&set, r.lambda_hat.values(), &part) <= eps + 1e-9);
        assert_trace_monotone(&r);
    }

    #[test]
    fn sembar_controls_each_organ_and_nests(set in sample_set(6), anchor in vec(0f64..0.3, 3), t1 in 0f64..1.0, t2 in 0f64..1.0) {
        let n = set.len();
        let k = set.k_classes();
        let anchor = sem(&anchor[..k]);
        let (e1, e2) = (feasible_eps(n, t1.min(t2)), feasible_eps(n, t1.max(t2)));
        let r1 = calibrate_sembar(&set, &anchor, e1).unwrap();
        let r2 = calibrate_sembar(&set, &anchor, e2).unwrap();
        for o in r1.per_organ.as_ref().unwrap() {
            if !o.calibrated {
                continue;
            }
            let present: Vec<&CalibrationSample> = set.samples().iter().filter(|s| s.seg.class_counts()[o.organ] > 0).collect();
            let sum: f64 = present.iter()
                .map(|s| loss01_per_organ(s, &r1.lambda_hat).unwrap()[o.organ].unwrap())
                .sum();
            prop_assert_eq!(o.n_eff, present.len());
            prop_assert!((sum + 1.0) / (present.len() as f64 + 1.0) <= e1 + 1e-9);
            for pair in o.trace.windows(2) {
                prop_assert!(pair[1].adjusted_risk <= pair[0].adjusted_risk + 1e-12);
            }
        }
        for ((a, b), base) in r1.lambda_hat.values().iter().zip(r2.lambda_hat.values()).zip(anchor.values()) {
            prop_assert!(a >= b);
            prop_assert!(*b >= *base);
        }
    }

    // ---- tensor io

    #[test]
    fn tensor_round_trip_is_bitwise(values in vec(any::<f32>(), 1..200)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        let t = ImageTensor::new(vec![values.len()], values).unwrap();
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn split_is_deterministic(set in sample_set(8), seed in any::<u64>()) {
        let n = set.len();
        let plan = SplitPlan { n_opt: n / 3, n_cal: n - n / 3, n_test: 0, seed };
        let ids = |s: &SampleSet| s.samples().iter().map(|x| x.id.clone()).collect::<Vec<_>>();
        let (a1, b1, _) = split(&set, &plan).unwrap();
        let (a2, b2, _) = split(&set, &plan).unwrap();
        prop_assert_eq!(ids(&a1), ids(&a2));
        prop_assert_eq!(ids(&b1), ids(&b2));
        let mut all = [ids(&a1), ids(&b1)].concat();
        all.sort();
        let mut orig = ids(&set);
        orig.sort();
        prop_assert_eq!(all, orig);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn phantoms_reproducible_and_in_range(seed in any::<u64>()) {
        let cfg = PhantomConfig::heterogeneous().with_seed(seed);
        let a = generate(&cfg, 3).unwrap();
        let b = generate(&cfg, 3).unwrap();
        prop_assert_eq!(&a, &b);
        for s in a.samples() {
            prop_assert!(s.x.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn seeded_subsampling_is_reproducible(seed in any::<u64>()) {
        let opt = generate(&PhantomConfig::heterogeneous().with_seed(seed), 4).unwrap();
        let part = PartitionSpec::Semantic { k: opt.k_classes() };
        let settings = AnchorSettings { seed, d_opt: Some(200), ..AnchorSettings::new(0.1) };
        prop_assert_eq!(subsample(&opt, &part, &settings).unwrap(), subsample(&opt, &part, &settings).unwrap());
    }
}
