use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Enumerates every monotone coupling path and keeps the best bottleneck.
fn frechet_brute(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    fn walk(a: &Array2<f64>, b: &Array2<f64>, i: usize, j: usize, worst: f64, best: &mut f64) {
        let d = (&a.row(i) - &b.row(j)).mapv(|v| v * v).sum().sqrt();
        let worst = worst.max(d);
        if i + 1 == a.nrows() && j + 1 == b.nrows() {
            *best = best.min(worst);
            return;
        }
        if i + 1 < a.nrows() {
            walk(a, b, i + 1, j, worst, best);
        }
        if j + 1 < b.nrows() {
            walk(a, b, i, j + 1, worst, best);
        }
        if i + 1 < a.nrows() && j + 1 < b.nrows() {
            walk(a, b, i + 1, j + 1, worst, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

#[test]
fn l2_examples() {
    let gt = Array2::zeros((4, 3));
    let mut pred = Array2::zeros((4, 3));
    assert_eq!(l2_error(pred.view(), gt.view()).unwrap(), 0.0);
    pred.column_mut(1).fill(1.0);
    assert_eq!(l2_error(pred.view(), gt.view()).unwrap(), 1000.0);
    assert!(matches!(l2_error(pred.view(), Array2::zeros((4, 2)).view()), Err(Error::Shape(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(20, 3, &mut rng);
    let b = random(20, 3, &mut rng);
    let mut script = 0.0;
    for t in 0..20 {
        let mut s = 0.0;
        for c in 0..3 {
            s += (a[[t, c]] - b[[t, c]]).powi(2);
        }
        script += s.sqrt();
    }
    script = script / 20.0 * 1000.0;
    assert!((l2_error(a.view(), b.view()).unwrap() - script).abs() < 1e-9);
    let perm = [5, 2, 19, 0, 1, 3, 4, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18];
    let (pa, pb) = (a.select(ndarray::Axis(0), &perm), b.select(ndarray::Axis(0), &perm));
    assert!((l2_error(pa.view(), pb.view()).unwrap() - script).abs() < 1e-9);
}

#[test]
fn frechet_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(5, 2, &mut rng);
    assert_eq!(frechet_distance(a.view(), a.view()).unwrap(), 0.0);
    let p = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
    let q = Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap();
    assert_eq!(frechet_distance(p.view(), q.view()).unwrap(), 5.0);
    assert!(matches!(frechet_distance(p.view(), random(2, 3, &mut rng).view()), Err(Error::Shape(_))));
    for _ in 0..50 {
        let a = random(6, 2, &mut rng);
        let b = random(6, 2, &mut rng);
        assert_eq!(frechet_distance(a.view(), b.view()).unwrap(), frechet_brute(&a, &b));
    }
}

proptest! {
    #[test]
    fn frechet_pseudometric(seed in any::<u64>(), na in 1usize..6, nb in 1usize..6, nc in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (random(na, 3, &mut rng), random(nb, 3, &mut rng), random(nc, 3, &mut rng));
        let f = |x: &Array2<f64>, y: &Array2<f64>| frechet_distance(x.view(), y.view()).unwrap();
        prop_assert_eq!(f(&a, &b), frechet_brute(&a, &b));
        prop_assert!(f(&a, &b) >= 0.0);
        prop_assert_eq!(f(&a, &b), f(&b, &a));
        prop_assert!(f(&a, &c) <= f(&a, &b) + f(&b, &c) + 1e-12);
        let d0 = (&a.row(0) - &b.row(0)).mapv(|v| v * v).sum().sqrt();
        let d1 = (&a.row(na - 1) - &b.row(nb - 1)).mapv(|v| v * v).sum().sqrt();
        prop_assert!(f(&a, &b) >= d0.max(d1));
    }
}

#[test]
fn diversity_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random(10, 3, &mut rng);
    let same = vec![s.view(); 6];
    assert_eq!(diversity(&same, 0, 1).unwrap(), 0.0);
    assert!(matches!(diversity(&same[..1], 0, 1), Err(Error::Data(_))));

    let seqs: Vec<Array2<f64>> = (0..4).map(|_| random(8, 3, &mut rng)).collect();
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let d = diversity(&views, 2, 9).unwrap();
    let scaled: Vec<Array2<f64>> = seqs.iter().map(|s| s * 2.5).collect();
    let sviews: Vec<_> = scaled.iter().map(|s| s.view()).collect();
    assert!((diversity(&sviews, 2, 9).unwrap() - 2.5 * d).abs() < 1e-12);

    // Hand enumeration of the seeded pairing.
    let pairs = sample_pairs(4, 2, 9);
    assert_eq!(pairs.len(), 2);
    let mut seen: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3]);
    let mut manual = 0.0;
    for (i, j) in pairs {
        let mut per = 0.0;
        for t in 0..8 {
            let mut s = 0.0;
            for c in 0..3 {
                s += (seqs[i][[t, c]] - seqs[j][[t, c]]).powi(2);
            }
            per += s.sqrt();
        }
        manual += per / 8.0;
    }
    assert!((d - manual / 2.0).abs() < 1e-12);
}

fn envelope(n: usize) -> Vec<f64> {
    (0..n).map(|t| ((t as f64) * 0.37).sin().abs() + 0.3 * ((t as f64) * 0.11).cos()).collect()
}

#[test]
fn sync_examples() {
    let e = envelope(100);
    let mut mouth = Array2::zeros((100, 181));
    for (t, v) in e.iter().enumerate() {
        mouth[[t, 0]] = *v + 2.0;
    }
    let r = sync_proxy(&e.iter().map(|v| v + 2.0).collect::<Vec<_>>(), mouth.view()).unwrap();
    assert!((r.corr - 1.0).abs() < 1e-12 && r.lag == 0 && !r.degenerate);

    let flat = Array2::from_elem((100, 181), 0.1);
    let r = sync_proxy(&e, flat.view()).unwrap();
    assert!(r.degenerate && r.corr == 0.0);

    // Jaw trails the audio by two frames.
    let mut shifted = Array2::zeros((100, 181));
    for t in 2..100 {
        shifted[[t, 0]] = e[t - 2] + 2.0;
    }
    shifted[[0, 0]] = 2.0;
    shifted[[1, 0]] = 2.0;
    let r = sync_proxy(&e, shifted.view()).unwrap();
    assert_eq!(r.lag, 2);
    assert!(r.corr > 0.999);
    assert!(matches!(sync_proxy(&e[..50], shifted.view()), Err(Error::Alignment(_))));
}

#[test]
fn report_roundtrip_and_csv() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clips: Vec<ClipEval> = (0..3)
        .map(|i| ClipEval {
            clip_id: format!("c{i}"),
            prediction: CoefficientSequence::new("p", random(12, 184, &mut rng) * 0.1).unwrap(),
            ground_truth: CoefficientSequence::new("g", random(12, 184, &mut rng) * 0.1).unwrap(),
            energy: envelope(12),
        })
        .collect();
    let (report, rows) = evaluate(&clips, 0, 7).unwrap();
    assert_eq!(report.clip_count, 3);
    assert_eq!(report.diversity_pairs, 1);
    assert!(report.pose_error >= 0.0 && report.frechet_distance >= 0.0);
    assert!((-1.0..=1.0).contains(&report.sync_corr));
    assert_eq!(evaluate(&clips, 0, 7).unwrap().0, report);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    report.write_json(&path).unwrap();
    assert_eq!(EvalReport::read_json(&path).unwrap(), report);
    let csv = clip_metrics_csv(&rows);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("clip_id,"));
}
