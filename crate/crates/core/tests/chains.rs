use amcmc::diagnostics::{ksd, KsdConfig};
use amcmc::kernels::{run_adaptive, run_chain, KernelConfig, ParticleStreams, Provenance, SampleBatch};
use amcmc::targets::{DiagGaussian, GaussianMixture1D};

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

#[test]
fn mala_reaches_gaussian_moments_from_a_point_start() {
    let target = DiagGaussian::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
    let rows = vec![[0.0, 0.0]; 2000];
    let start = SampleBatch::from_rows(&rows, Provenance::StudentInitial).unwrap();
    let run = run_chain(&start, &KernelConfig::mala(300, 0.2), &target, &mut ParticleStreams::new(5, 2000)).unwrap();
    for (j, (mu, sd)) in [(1.0, 0.5), (-2.0, 2.0)].into_iter().enumerate() {
        let (m, v) = moments(&run.batch.column(j));
        // 2000 independent chains: standard error of the mean is sd / 45
        assert!((m - mu).abs() < 4.0 * sd / 44.7, "dim {j}: mean {m}");
        assert!((v.sqrt() / sd - 1.0).abs() < 0.08, "dim {j}: std {}", v.sqrt());
    }
}

#[test]
fn both_mixture_modes_are_populated_after_long_chains() {
    let target = GaussianMixture1D::default();
    let rows: Vec<[f64; 1]> = (0..1000).map(|k| [if k % 2 == 0 { -3.0 } else { 3.0 }]).collect();
    let start = SampleBatch::from_rows(&rows, Provenance::StudentInitial).unwrap();
    let run = run_chain(&start, &KernelConfig::mala(200, 0.5), &target, &mut ParticleStreams::new(1, 1000)).unwrap();
    let z = run.batch.column(0);
    let right = z.iter().filter(|v| **v > 0.0).count() as f64 / z.len() as f64;
    assert!((right - 0.5).abs() < 0.06, "right fraction {right}");
    let (m, v) = moments(&z);
    assert!(m.abs() < 0.3 && (v - 10.0).abs() < 1.0, "mean {m} var {v}");
}

#[test]
fn adaptation_settles_near_the_requested_acceptance() {
    let target = DiagGaussian::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
    let rows = vec![[0.0; 3]; 50];
    let start = SampleBatch::from_rows(&rows, Provenance::StudentInitial).unwrap();
    let config = KernelConfig {
        adapt_rate: 0.05,
        ..KernelConfig::mala(1, 5.0).with_acceptance_target(0.7)
    };
    let run = run_adaptive(&start, &config, &target, 3000, &mut ParticleStreams::new(2, 50)).unwrap();
    let last = *run.running_acceptance.last().unwrap();
    assert!((last - 0.7).abs() < 0.05, "acceptance {last}");
    assert!(run.config.step_size < 5.0);
}

#[test]
fn ksd_separates_target_draws_from_shifted_ones() {
    let target = GaussianMixture1D::default();
    let rows: Vec<[f64; 1]> = (0..600).map(|k| [if k % 2 == 0 { -3.0 } else { 3.0 }]).collect();
    let start = SampleBatch::from_rows(&rows, Provenance::StudentInitial).unwrap();
    let good = run_chain(&start, &KernelConfig::mala(200, 0.5), &target, &mut ParticleStreams::new(9, 600)).unwrap().batch;
    let shifted: Vec<[f64; 1]> = good.column(0).iter().map(|z| [z + 1.0]).collect();
    let bad = SampleBatch::from_rows(&shifted, Provenance::StudentInitial).unwrap();
    let cfg = KsdConfig::v_statistic();
    let (k_good, k_bad) = (ksd(&good, &target, &cfg).unwrap(), ksd(&bad, &target, &cfg).unwrap());
    assert!(k_bad > 5.0 * k_good, "{k_good} vs {k_bad}");
}
