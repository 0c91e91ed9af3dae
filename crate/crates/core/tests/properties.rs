use proptest::prelude::*;

use icone::data::{self, Dataset, GmmSpec};
use icone::losses::diversity::{ortho_hinge, ortho_hinge_dense};
use icone::metrics::{self, entropy_rank};
use icone::Tensor;

fn unit_rows(raw: &[(f64, f64)]) -> Vec<f64> {
    raw.iter()
        .flat_map(|&(a, b)| {
            let n = (a * a + b * b).sqrt().max(1e-3);
            [a / n, b / n]
        })
        .collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn rotate(z: &Tensor, theta: f64) -> Tensor {
    let (c, s) = (theta.cos(), theta.sin());
    let data = z.data().chunks(2).flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
    Tensor::new(z.shape().to_vec(), data).unwrap()
}

/// Direct double sum over ordered pairs of the squared positive cosines.
fn hinge_oracle(rows: &[f64], n: usize, d: usize, classes: Option<&[usize]>) -> f64 {
    let (mut acc, mut pairs) = (0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j || classes.is_some_and(|c| c[i] == c[j]) {
                continue;
            }
            let g: f64 = (0..d).map(|k| rows[i * d + k] * rows[j * d + k]).sum();
            acc += g.max(0.0).powi(2);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        acc / pairs as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn planar_sweep_matches_pair_sum(raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..60)) {
        let n = raw.len();
        let rows = unit_rows(&raw);
        let (sweep, g_sweep) = ortho_hinge(&rows, n, 2, None).unwrap();
        let (dense, g_dense) = ortho_hinge_dense(&rows, n, 2, None).unwrap();
        let oracle = hinge_oracle(&rows, n, 2, None);
        prop_assert!((sweep - oracle).abs() <= 1e-12 * oracle.max(1.0));
        prop_assert!((dense - oracle).abs() <= 1e-12 * oracle.max(1.0));
        for (a, b) in g_sweep.iter().zip(&g_dense) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn class_masked_hinge_matches_pair_sum(
        raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0usize..3), 2..40),
    ) {
        let n = raw.len();
        let rows = unit_rows(&raw.iter().map(|&(a, b, _)| (a, b)).collect::<Vec<_>>());
        let classes: Vec<usize> = raw.iter().map(|r| r.2).collect();
        if classes.iter().all(|&c| c == classes[0]) {
            prop_assert!(ortho_hinge(&rows, n, 2, Some(&classes)).is_err());
            return Ok(());
        }
        let (v, _) = ortho_hinge(&rows, n, 2, Some(&classes)).unwrap();
        let oracle = hinge_oracle(&rows, n, 2, Some(&classes));
        prop_assert!((v - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn hinge_ignores_row_order(raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..40), shift in 0usize..40) {
        let n = raw.len();
        let mut rotated = raw.clone();
        rotated.rotate_left(shift % n);
        let (a, _) = ortho_hinge(&unit_rows(&raw), n, 2, None).unwrap();
        let (b, _) = ortho_hinge(&unit_rows(&rotated), n, 2, None).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-13);
    }

    #[test]
    fn batches_partition_ids(n in 1usize..300, b in 1usize..64, seed in any::<u64>()) {
        let b = b.min(n);
        let ids: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let bs = data::batches(&ids, b, seed).unwrap();
        prop_assert_eq!(bs.len(), n.div_ceil(b));
        for (k, batch) in bs.iter().enumerate() {
            if k + 1 < bs.len() {
                prop_assert_eq!(batch.len(), b);
            } else {
                prop_assert!(!batch.is_empty() && batch.len() <= b);
            }
        }
        let mut all: Vec<usize> = bs.concat();
        all.sort_unstable();
        prop_assert_eq!(all, ids);
    }

    #[test]
    fn knn_is_rotation_invariant(train in matrix(40, 2), test in matrix(15, 2), theta in 0.0f64..std::f64::consts::TAU) {
        let train_labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let test_labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
        let a = metrics::knn_predict(&train, &train_labels, &test, 5).unwrap();
        let b = metrics::knn_predict(&rotate(&train, theta), &train_labels, &rotate(&test, theta), 5).unwrap();
        let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        // exact distance ties may resolve differently after rounding
        prop_assert!(agree >= 14);
        let acc = metrics::knn_accuracy(&train, &train_labels, &test, &test_labels, 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn spectrum_metrics_rotation_invariant_and_bounded(z in matrix(12, 2), theta in 0.0f64..std::f64::consts::TAU) {
        let r = rotate(&z, theta);
        let (er, er_r) = (metrics::effective_rank(&z).unwrap(), metrics::effective_rank(&r).unwrap());
        let (rm, rm_r) = (metrics::rankme(&z).unwrap(), metrics::rankme(&r).unwrap());
        prop_assert!((er - er_r).abs() <= 1e-9 && (rm - rm_r).abs() <= 1e-9);
        prop_assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&er));
        prop_assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&rm));
    }

    #[test]
    fn entropy_rank_bounds(s in prop::collection::vec(0.0f64..10.0, 1..20)) {
        let r = entropy_rank(&s);
        prop_assert!(r >= 1.0 - 1e-12 && r <= s.len() as f64 + 1e-9);
    }

    #[test]
    fn uniformity_rises_as_points_contract(z in matrix(30, 2), c in 0.05f64..1.0) {
        let shrunk = z.map(|x| c * x);
        let u = metrics::uniformity(&z, 2.0, 0).unwrap();
        let u_shrunk = metrics::uniformity(&shrunk, 2.0, 0).unwrap();
        prop_assert!(u <= 0.0 && u_shrunk <= 0.0);
        prop_assert!(u_shrunk >= u - 1e-12);
    }

    #[test]
    fn geometry_ranges(z in matrix(24, 2)) {
        let labels: Vec<usize> = (0..24).map(|i| i % 4).collect();
        let s = metrics::silhouette(&z, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(metrics::alignment_same_class(&z, &labels, 2.0, 0).unwrap() >= 0.0);
    }

    #[test]
    fn balanced_accuracy_bounds(truth in prop::collection::vec(0usize..4, 1..50), shift in 0usize..4) {
        prop_assert_eq!(metrics::balanced_accuracy(&truth, &truth).unwrap(), 1.0);
        let other: Vec<usize> = truth.iter().map(|t| (t + shift) % 4).collect();
        let b = metrics::balanced_accuracy(&truth, &other).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        if shift != 0 {
            prop_assert_eq!(b, 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_csv_round_trip(seed in any::<u64>(), per_class in 2usize..30, classes in 2usize..6) {
        let spec = GmmSpec { seed, per_class, num_classes: classes, ..GmmSpec::default() };
        let ds = data::generate(&spec).unwrap();
        prop_assert_eq!(ds.train.len() + ds.test.len(), ds.len());
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.labels, ds.labels);
        prop_assert_eq!(back.train, ds.train);
        prop_assert_eq!(back.points.data(), ds.points.data());
    }

    #[test]
    fn augmentation_keeps_shape_and_centers(seed in any::<u64>(), v in 1usize..6) {
        let points = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, -1.0, 5.0]).unwrap();
        let a = data::augment(&points, v, 0.0, seed).unwrap();
        prop_assert_eq!(a.shape(), &[3, v, 2]);
        for i in 0..3 {
            for m in 0..v {
                prop_assert_eq!(&a.data()[(i * v + m) * 2..(i * v + m + 1) * 2], points.row(i));
            }
        }
    }
}
