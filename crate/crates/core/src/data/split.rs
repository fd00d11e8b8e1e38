use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Domain, Manifest, Split};
use crate::error::{Error, Result};

/// Largest-remainder apportionment of `n` items over `fractions`.
/// Ties in the remainder go to the later split; every split with a positive
/// fraction receives at least one item.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    for i in 0..counts.len() {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..counts.len())
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .expect("non-empty");
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Assigns every patient of `domain` to a split. Patients are sorted, then
/// shuffled with `seed`, then cut into contiguous runs of the apportioned
/// sizes in train/val/test order.
pub fn patient_split(
    manifest: &Manifest,
    domain: Domain,
    fractions: &BTreeMap<Split, f64>,
    seed: u64,
) -> Result<Manifest> {
    let total: f64 = fractions.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
    }
    if let Some((s, f)) = fractions.iter().find(|(_, f)| !(**f >= 0.0)) {
        return Err(Error::Config(format!("fraction for {s} is {f}")));
    }
    let requested: Vec<(Split, f64)> = Split::ALL
        .iter()
        .filter_map(|s| fractions.get(s).map(|f| (*s, *f)))
        .filter(|(_, f)| *f > 0.0)
        .collect();
    let mut patients: Vec<String> = manifest.patients(domain).into_iter().collect();
    if patients.len() < requested.len() {
        return Err(Error::Config(format!(
            "{} {domain} patients cannot fill {} splits",
            patients.len(),
            requested.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let counts = apportion(
        patients.len(),
        &requested.iter().map(|(_, f)| *f).collect::<Vec<_>>(),
    );
    let mut out = manifest.clone();
    out.split_assignment
        .retain(|p, _| !patients.iter().any(|q| q == p));
    let mut it = patients.into_iter();
    for ((split, _), count) in requested.iter().zip(counts) {
        for p in it.by_ref().take(count) {
            out.split_assignment.insert(p, *split);
        }
    }
    for r in out.records.iter_mut().filter(|r| r.domain == domain) {
        r.split = out.split_assignment.get(&r.patient_id).copied();
    }
    out.validate()?;
    Ok(out)
}
