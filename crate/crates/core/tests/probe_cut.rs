use statrs::distribution::{ChiSquared, ContinuousCDF};

use citi_core::numerics::derive_seed;
use citi_core::tasks::probe_cut;

#[test]
fn probe_cut_is_uniform_over_target_prefixes() {
    for len in [1usize, 2, 7, 16] {
        let n = 4000;
        let mut counts = vec![0usize; len];
        for i in 0..n {
            let k = probe_cut(len, derive_seed(9, &format!("cut/{i}"))).unwrap();
            assert!(k < len);
            counts[k] += 1;
        }
        if len == 1 {
            continue;
        }
        let expected = n as f64 / len as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((len - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.001, "len {len}: chi2 {stat} p {p}");
    }
    assert!(probe_cut(0, 1).is_err());
}
