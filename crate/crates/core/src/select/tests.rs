use super::*;
use crate::corpus::{generate, CorpusSpec, Generator};
use crate::nn::rng::rng_from_seed;
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            // Uneven column scales keep the spectrum well separated.
            m.set(r, c, rng.random_range(-1.0..1.0) * (c as f64 + 1.0));
        }
    }
    m
}

fn naive_covariance(data: &Matrix) -> Matrix {
    let (n, d) = data.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += data.get(r, c);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for r in 0..n {
                s += (data.get(r, i) - mean[i]) * (data.get(r, j) - mean[j]);
            }
            cov.set(i, j, s / (n as f64 - 1.0));
        }
    }
    cov
}

/// Power iteration with deflation on an explicit symmetric matrix.
fn power_eigs(cov: &Matrix, k: usize) -> Vec<(f64, Vec<f64>)> {
    let d = cov.rows();
    let mut a = cov.clone();
    let mut out = Vec::new();
    for i in 0..k {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.1 * ((i + j) as f64)).collect();
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let w: Vec<f64> = (0..d).map(|r| a.row(r).iter().zip(&v).map(|(x, y)| x * y).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            lambda = norm;
            if delta < 1e-15 {
                break;
            }
        }
        for r in 0..d {
            for c in 0..d {
                a.set(r, c, a.get(r, c) - lambda * v[r] * v[c]);
            }
        }
        out.push((lambda, v));
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn stats_from(mu: Vec<f64>, sigma: Matrix) -> ReferenceStats {
    let d = mu.len();
    let mut inv = Matrix::zeros(d, d);
    for i in 0..d {
        inv.set(i, i, 1.0 / sigma.get(i, i));
    }
    ReferenceStats {
        mu,
        sigma,
        sigma_inv: inv,
        shrinkage_eps: 0.0,
    }
}

#[test]
fn pca_hand_cases() {
    let axis = Matrix::from_rows(&[vec![-2.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]]).unwrap();
    let b = fit_pca(&axis, 1).unwrap();
    assert_eq!(b.components.row(0), &[1.0, 0.0]);

    let line = Matrix::from_rows(&(0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect::<Vec<_>>()).unwrap();
    let b = fit_pca(&line, 2).unwrap();
    let total: f64 = (0..2).map(|i| naive_covariance(&line).get(i, i)).sum();
    assert!((b.eigenvalues[0] - total).abs() < 1e-9);
    assert!(b.eigenvalues[1].abs() < 1e-9);
    assert!(b.components.row(0)[1] > 0.0);

    assert!(matches!(fit_pca(&axis, 4), Err(Error::Validation(_))));
    assert!(matches!(fit_pca(&axis.slice_rows(0, 2), 2), Err(Error::InsufficientData(_))));
}

#[test]
fn pca_matches_power_iteration() {
    let data = random_matrix(500, 8, 1);
    let b = fit_pca(&data, 3).unwrap();
    let oracle = power_eigs(&naive_covariance(&data), 3);
    for (i, (lambda, v)) in oracle.iter().enumerate() {
        assert!((b.eigenvalues[i] - lambda).abs() < 1e-8 * lambda.max(1.0));
        let c = b.components.row(i);
        let sign = dot(c, v).signum();
        for (x, y) in c.iter().zip(v) {
            assert!((x - sign * y).abs() < 1e-8, "component {i}");
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((dot(b.components.row(i), b.components.row(j)) - expect).abs() < 1e-8);
        }
    }
    assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    for r in 0..20 {
        let h = data.row(r);
        let p = project(&b, h).unwrap();
        for (i, (_, v)) in oracle.iter().enumerate() {
            let centered: Vec<f64> = h.iter().zip(&b.mean_center).map(|(a, m)| a - m).collect();
            assert!((p[i].abs() - dot(v, &centered).abs()).abs() < 1e-8);
        }
    }
}

#[test]
fn projection_contracts() {
    let data = random_matrix(100, 6, 2);
    let b = fit_pca(&data, 3).unwrap();
    assert!(project(&b, &b.mean_center).unwrap().iter().all(|v| *v == 0.0));
    let full = fit_pca(&data, 6).unwrap();
    for r in 0..10 {
        let h = data.row(r);
        let norm: f64 = h.iter().zip(&b.mean_center).map(|(a, m)| (a - m).powi(2)).sum::<f64>().sqrt();
        let p = project(&b, h).unwrap();
        assert!(dot(&p, &p).sqrt() <= norm + 1e-10);
        let q = project(&full, h).unwrap();
        assert!((dot(&q, &q).sqrt() - norm).abs() < 1e-10);
    }
    assert!(matches!(project(&b, &[1.0]), Err(Error::Shape(_))));
}

#[test]
fn reference_stats_cases() {
    let two = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let s = fit_reference_stats(&two, 1e-4).unwrap();
    assert_eq!(s.mu, vec![1.0, 0.0]);
    assert_eq!(s.sigma.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    let pair = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
    assert!(matches!(fit_reference_stats(&pair, 1e-4), Err(Error::InsufficientData(_))));

    // The hand case from two points, checked through the covariance helper.
    let cov = covariance(&pair, &[1.0, 0.0]);
    assert_eq!(cov.as_slice(), &[2.0, 0.0, 0.0, 0.0]);

    let same = Matrix::filled(5, 3, 1.5);
    let s = fit_reference_stats(&same, 1e-4).unwrap();
    assert!(s.sigma.as_slice().iter().all(|v| *v == 0.0));
    for i in 0..3 {
        assert!((s.sigma_inv.get(i, i) - 1e4).abs() < 1e-6);
    }

    let data = random_matrix(200, 5, 3);
    let s = fit_reference_stats(&data, 1e-4).unwrap();
    assert!(s.sigma.max_abs_diff(&naive_covariance(&data)) < 1e-12);
    let mut shrunk = s.sigma.clone();
    let tr: f64 = (0..5).map(|i| s.sigma.get(i, i)).sum();
    for i in 0..5 {
        shrunk.set(i, i, shrunk.get(i, i) + 1e-4 * tr / 5.0);
    }
    assert!(s.sigma_inv.matmul(&shrunk).unwrap().max_abs_diff(&Matrix::identity(5)) < 1e-6);
}

#[test]
fn mahalanobis_hand_cases() {
    let id = stats_from(vec![1.0, 1.0], Matrix::identity(2));
    assert_eq!(mahalanobis(&[1.0, 1.0], &id), 0.0);
    assert_eq!(mahalanobis(&[4.0, 5.0], &id), 25.0);
    let diag = stats_from(vec![0.0, 0.0], Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap());
    assert_eq!(mahalanobis(&[2.0, 1.0], &diag), 2.0);
}

#[test]
fn nearest_rank_convention() {
    let s: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(nearest_rank(&s, 0.9).unwrap(), 9.0);
    assert_eq!(nearest_rank(&s, 0.7).unwrap(), 7.0);
    assert_eq!(nearest_rank(&s, 1.0).unwrap(), 10.0);
    assert_eq!(nearest_rank(&[4.2], 0.1).unwrap(), 4.2);
    assert!(matches!(nearest_rank(&[], 0.9), Err(Error::Validation(_))));
    assert!(matches!(nearest_rank(&s, 0.0), Err(Error::Validation(_))));
}

fn toy_reference(seed: u64) -> (Reference, Matrix) {
    let general = random_matrix(300, 6, seed);
    let basis = fit_pca(&general, 4).unwrap();
    let stats = fit_reference_stats(&project_rows(&basis, &general).unwrap(), 0.0).unwrap();
    (Reference { basis, stats }, general)
}

#[test]
fn affine_invariance_and_ranking_stability() {
    let general = random_matrix(300, 4, 5);
    let cands = random_matrix(40, 4, 6);
    let map = Matrix::from_rows(&[
        vec![2.0, 0.5, 0.0, 0.1],
        vec![0.0, 1.0, -0.3, 0.0],
        vec![0.2, 0.0, 3.0, 0.0],
        vec![0.0, 0.1, 0.0, 0.5],
    ])
    .unwrap();
    let s = fit_reference_stats(&general, 0.0).unwrap();
    let s2 = fit_reference_stats(&general.matmul_t(&map).unwrap(), 0.0).unwrap();
    let moved = cands.matmul_t(&map).unwrap();
    for r in 0..cands.rows() {
        let a = mahalanobis(cands.row(r), &s);
        let b = mahalanobis(moved.row(r), &s2);
        assert!((a - b).abs() < 1e-6 * a.max(1.0));
    }

    let (reference, general) = toy_reference(7);
    let traces: Vec<Matrix> = (0..30).map(|i| random_matrix(1 + i % 5, 6, 100 + i as u64)).collect();
    let samples = generate(&CorpusSpec::new(Generator::Arithmetic, 30, 1)).unwrap();
    let cards = score_dataset(&samples, &traces, &reference.basis, &reference.stats, 0.9).unwrap();
    let c = 3.5;
    let scaled_general = general.map(|v| v * c);
    let basis = fit_pca(&scaled_general, 4).unwrap();
    let stats = fit_reference_stats(&project_rows(&basis, &scaled_general).unwrap(), 1e-4).unwrap();
    let scaled: Vec<Matrix> = traces.iter().map(|t| t.map(|v| v * c)).collect();
    let cards2 = score_dataset(&samples, &scaled, &basis, &stats, 0.9).unwrap();
    let order = |cs: &[SampleScoreCard]| ranking(cs, Strategy::Selected, 0);
    assert_eq!(order(&cards), order(&cards2));
}

fn cards_from(scores: &[f64]) -> (Vec<CorpusSample>, Vec<SampleScoreCard>) {
    let mut samples = generate(&CorpusSpec::new(Generator::Arithmetic, scores.len(), 2)).unwrap();
    for (i, s) in samples.iter_mut().enumerate() {
        s.sample_id = i as u64 + 1;
    }
    let cards = scores
        .iter()
        .enumerate()
        .map(|(i, &a)| SampleScoreCard {
            sample_id: i as u64 + 1,
            token_scores: vec![a],
            aggregate: a,
            rho_used: 0.9,
        })
        .collect();
    (samples, cards)
}

fn ids(s: &[CorpusSample]) -> Vec<u64> {
    s.iter().map(|x| x.sample_id).collect()
}

#[test]
fn topk_selection() {
    let (samples, cards) = cards_from(&[0.1, 5.0, 3.0]);
    assert_eq!(ids(&select_topk(&samples, &cards, 2.0 / 3.0, "h").unwrap()), vec![2, 3]);
    let all = select_topk(&samples, &cards, 1.0, "h").unwrap();
    assert_eq!(ids(&all), vec![1, 2, 3]);
    let meta = all[1].selection_meta.as_ref().unwrap();
    assert_eq!((meta.aggregate_score, meta.budget_fraction, meta.basis_hash.as_str()), (5.0, 1.0, "h"));
    assert!(matches!(select_topk(&[], &[], 0.5, "h"), Err(Error::Validation(_))));
    assert!(matches!(select_topk(&samples, &cards, 0.0, "h"), Err(Error::Validation(_))));

    let (tied, tcards) = cards_from(&[1.0, 2.0, 2.0, 0.5]);
    assert_eq!(ids(&select_topk(&tied, &tcards, 0.25, "h").unwrap()), vec![2]);

    let mut rng = rng_from_seed(9);
    let scores: Vec<f64> = (0..100).map(|_| (rng.random_range(0..40) as f64) * 0.5).collect();
    let (samples, cards) = cards_from(&scores);
    for f in [0.1, 0.25, 0.33, 0.5, 0.9] {
        let got = ids(&select_topk(&samples, &cards, f, "h").unwrap());
        let mut oracle: Vec<(f64, u64)> = scores.iter().enumerate().map(|(i, &s)| (s, i as u64 + 1)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut want: Vec<u64> = oracle.iter().take((f * 100.0_f64).ceil() as usize).map(|x| x.1).collect();
        want.sort_unstable();
        assert_eq!(got, want, "fraction {f}");
    }
}

#[test]
fn budgets_are_nested_for_every_strategy() {
    let mut rng = rng_from_seed(4);
    let scores: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..10.0)).collect();
    let (samples, cards) = cards_from(&scores);
    for strategy in Strategy::ALL {
        let mut prev: Vec<u64> = Vec::new();
        for f in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let cur = ids(&select_subset(&samples, &cards, f, strategy, 3, "h").unwrap());
            assert!(prev.iter().all(|id| cur.contains(id)), "{strategy:?} at {f}");
            prev = cur;
        }
        assert_eq!(prev.len(), 60);
    }
    let sel = ids(&select_subset(&samples, &cards, 0.5, Strategy::Selected, 0, "h").unwrap());
    let rev = ids(&select_subset(&samples, &cards, 0.5, Strategy::Reversed, 0, "h").unwrap());
    assert!(sel.iter().all(|id| !rev.contains(id)));
}

#[test]
fn score_sample_contract() {
    let (reference, _) = toy_reference(11);
    let trace = random_matrix(7, 6, 12);
    let card = score_sample(5, &trace, &reference.basis, &reference.stats, 0.9).unwrap();
    assert_eq!(card.token_scores.len(), 7);
    assert!(card.token_scores.iter().all(|v| *v >= 0.0));
    assert!(card.token_scores.contains(&card.aggregate));
    assert!(matches!(
        score_sample(5, &Matrix::zeros(0, 6), &reference.basis, &reference.stats, 0.9),
        Err(Error::Validation(_))
    ));
    assert_eq!(reference.basis.hash(), reference.basis.clone().hash());
    assert_eq!(reference.basis.hash().len(), 64);
}
