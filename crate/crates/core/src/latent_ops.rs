//! Walking the latent space: linear interpolation and neighbourhood sampling.

use std::collections::HashSet;

use rand_distr::{Distribution, StandardNormal};

use crate::encoding::{decode_vector, encode_password};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::linalg::Matrix;
use crate::rng;

fn latent_of(model: &FlowModel, password: &str) -> Result<Vec<f64>> {
    let x = encode_password(password, model.charset(), model.dim())?;
    Ok(model.forward(x.as_slice())?.0)
}

fn decode_rows(model: &FlowModel, x: &Matrix) -> Vec<String> {
    x.iter_rows().map(|r| decode_vector(r, model.charset())).collect()
}

/// Decodes `steps + 1` evenly spaced latent points from `start` to `target`.
pub fn interpolate(model: &FlowModel, start: &str, target: &str, steps: usize) -> Result<Vec<String>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be at least 1".into()));
    }
    let z1 = latent_of(model, start)?;
    let z2 = latent_of(model, target)?;
    let dim = model.dim();
    let mut z = Matrix::zeros(steps + 1, dim);
    for j in 0..=steps {
        let row = z.row_mut(j);
        if j == steps {
            // Endpoint taken verbatim so it inverts back to the target exactly.
            row.copy_from_slice(&z2);
            continue;
        }
        for k in 0..dim {
            row[k] = z1[k] + (z2[k] - z1[k]) / steps as f64 * j as f64;
        }
    }
    Ok(decode_rows(model, &model.inverse_batch(&z)?))
}

/// Samples `N(f(pivot), σ²I)` and decodes.
///
/// With `unique`, duplicates and the pivot itself are dropped and sampling
/// continues until `n` strings are found or `20n` draws have been made.
pub fn neighborhood(model: &FlowModel, pivot: &str, sigma: f64, n: usize, seed: u64, unique: bool) -> Result<Vec<String>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let zp = latent_of(model, pivot)?;
    let dim = model.dim();
    let mut r = rng::stream(seed, rng::purpose::NEIGHBORHOOD);
    let cap = if unique { 20 * n } else { n };
    let batch = n.clamp(1, 4096);
    let mut out = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    let mut drawn = 0;
    while out.len() < n && drawn < cap {
        let rows = batch.min(cap - drawn);
        let mut z = Matrix::zeros(rows, dim);
        for i in 0..rows {
            for (v, c) in z.row_mut(i).iter_mut().zip(&zp) {
                let e: f64 = StandardNormal.sample(&mut r);
                *v = c + sigma * e;
            }
        }
        drawn += rows;
        for p in decode_rows(model, &model.inverse_batch(&z)?) {
            if out.len() == n {
                break;
            }
            if unique && (p == pivot || !seen.insert(p.clone())) {
                continue;
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Mean Levenshtein distance (in characters) from `pivot` to each sample.
pub fn mean_edit_distance(pivot: &str, samples: &[String]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| strsim::levenshtein(pivot, s) as f64).sum::<f64>() / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Charset;
    use crate::flow::FlowConfig;
    use proptest::prelude::*;

    fn model(seed: u64) -> FlowModel {
        let cfg = FlowConfig { dim: 10, layers: 6, hidden: 16, blocks: 1, ..FlowConfig::default() };
        let mut m = FlowModel::new(cfg, Charset::default(), seed).unwrap();
        m.perturb(seed, 0.1);
        m
    }

    #[test]
    fn interpolation_examples() {
        let m = model(1);
        assert!(interpolate(&m, "abc", "xyz", 0).is_err());
        assert!(matches!(interpolate(&m, "abc", "wayyyyyyyyytoolong", 2), Err(Error::TooLong { .. })));
        assert_eq!(interpolate(&m, "same", "same", 5).unwrap(), vec!["same"; 6]);
        assert_eq!(interpolate(&m, "abc", "xyz99", 1).unwrap(), vec!["abc", "xyz99"]);
        let path = interpolate(&m, "abc", "xyz99", 2).unwrap();
        let z1 = latent_of(&m, "abc").unwrap();
        let z2 = latent_of(&m, "xyz99").unwrap();
        let mid: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + (b - a) / 2.0).collect();
        assert_eq!(path[1], decode_vector(&m.inverse(&mid).unwrap(), m.charset()));
    }

    #[test]
    fn neighborhood_examples() {
        let m = model(2);
        let tight = neighborhood(&m, "jimmy91", 1e-9, 20, 1, false).unwrap();
        assert_eq!(tight, vec!["jimmy91"; 20]);
        let a = neighborhood(&m, "jimmy91", 0.1, 5, 4, false).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, neighborhood(&m, "jimmy91", 0.1, 5, 4, false).unwrap());
        // Nothing but the pivot is reachable: the cap stops the search.
        assert!(neighborhood(&m, "jimmy91", 1e-9, 5, 1, true).unwrap().is_empty());
        let u = neighborhood(&m, "jimmy91", 0.5, 30, 5, true).unwrap();
        let distinct: HashSet<_> = u.iter().collect();
        assert_eq!(distinct.len(), u.len());
        assert!(!u.iter().any(|p| p == "jimmy91"));
        assert!(neighborhood(&m, "jimmy91", 0.0, 5, 1, false).is_err());
        assert!(neighborhood(&m, "jimmy91", 0.1, 0, 1, true).unwrap().is_empty());
    }

    #[test]
    fn edit_distance_mean() {
        assert_eq!(mean_edit_distance("abc", &[]), 0.0);
        let s = vec!["abc".to_string(), "abd".to_string(), "xbcd".to_string()];
        assert_eq!(mean_edit_distance("abc", &s), 1.0);
    }

    #[test]
    fn drift_grows_with_sigma() {
        let m = model(3);
        let d: Vec<f64> = [0.05, 0.10, 0.15]
            .iter()
            .map(|&s| mean_edit_distance("jimmy91", &neighborhood(&m, "jimmy91", s, 1000, 9, false).unwrap()))
            .collect();
        assert!(d[0] <= d[1] && d[1] <= d[2], "{d:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn endpoints_are_exact(a in "[a-z0-9!@]{0,10}", b in "[a-z0-9!@]{0,10}", steps in 1usize..8, seed in 0u64..5) {
            let m = model(seed);
            let path = interpolate(&m, &a, &b, steps).unwrap();
            prop_assert_eq!(path.len(), steps + 1);
            prop_assert_eq!(&path[0], &a);
            prop_assert_eq!(&path[steps], &b);
        }
    }
}
