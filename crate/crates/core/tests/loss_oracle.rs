//! Contrastive loss against closed forms and a scalar transcription.

use descry::loss::{ntxent, ntxent_grad, DescriptorBatch, LossConfig};
use descry::Rng;

fn unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_batch(rng: &mut Rng, pairs: usize, dim: usize) -> DescriptorBatch<f64> {
    let rows = (0..2 * pairs).flat_map(|_| unit(rng, dim)).collect();
    DescriptorBatch::new(dim, rows).unwrap()
}

pub fn single_pair_pool_is_exactly_zero() {
    let mut rng = Rng::new(41, 0);
    for _ in 0..20 {
        let b = random_batch(&mut rng, 1, 5);
        assert_eq!(ntxent(&b, &LossConfig::default()).unwrap(), 0.0);
    }
}

pub fn two_axis_pairs_match_closed_form() {
    let batch = DescriptorBatch::new(2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let tau = 0.07f64;
    // −log(e^{1/τ} / (e^{1/τ} + 2)) = log(1 + 2e^{−1/τ}); series to fourth order
    let x = 2.0 * (-1.0 / tau).exp();
    let series = x - x * x / 2.0 + x * x * x / 3.0 - x.powi(4) / 4.0;
    assert!((series - x.ln_1p()).abs() < 1e-20);
    let loss = ntxent(&batch, &LossConfig::default()).unwrap();
    assert!((loss - series).abs() < 1e-12, "{loss} vs {series}");
}

/// Direct transcription: every anchor, its positive, and the sum over all
/// other pool members, without any stabilization.
fn scalar_loss(b: &DescriptorBatch<f64>, tau: f64) -> f64 {
    let n = b.rows();
    let dot = |i: usize, j: usize| b.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let pos = i ^ 1;
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (dot(i, k) / tau).exp()).sum();
        total += -((dot(i, pos) / tau).exp() / denom).ln();
    }
    total / n as f64
}

pub fn random_batches_are_nonnegative_and_match_transcription() {
    let mut rng = Rng::new(42, 0);
    for _ in 0..100 {
        let pairs = 1 + rng.below(12);
        let dim = 2 + rng.below(14);
        let b = random_batch(&mut rng, pairs, dim);
        let loss = ntxent(&b, &LossConfig::default()).unwrap();
        assert!(loss >= 0.0);
        assert!((loss - scalar_loss(&b, 0.07)).abs() < 1e-10 * loss.max(1.0));
    }
}

pub fn descriptor_gradient_matches_finite_differences() {
    let mut rng = Rng::new(43, 0);
    let b = random_batch(&mut rng, 4, 3);
    let cfg = LossConfig::default();
    let (_, g) = ntxent_grad(&b, &cfg).unwrap();
    let h = 1e-6;
    for j in 0..b.data.len() {
        let mut plus = b.data.clone();
        plus[j] += h;
        let mut minus = b.data.clone();
        minus[j] -= h;
        // the loss must accept slightly unnormalized rows for the probe
        let lp = scalar_loss(&DescriptorBatch { data: plus, ..b.clone() }, 0.07);
        let lm = scalar_loss(&DescriptorBatch { data: minus, ..b.clone() }, 0.07);
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
        assert!(rel < 1e-6, "entry {j}: {} vs {fd}", g[j]);
    }
}

/// Entry points for the test harness; the checks above are also run by the acceptance suite.
mod harness {
    #[test]
    fn single_pair_pool_is_exactly_zero() {
        super::single_pair_pool_is_exactly_zero()
    }

    #[test]
    fn two_axis_pairs_match_closed_form() {
        super::two_axis_pairs_match_closed_form()
    }

    #[test]
    fn random_batches_are_nonnegative_and_match_transcription() {
        super::random_batches_are_nonnegative_and_match_transcription()
    }

    #[test]
    fn descriptor_gradient_matches_finite_differences() {
        super::descriptor_gradient_matches_finite_differences()
    }
}
