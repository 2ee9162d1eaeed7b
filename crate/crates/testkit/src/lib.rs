//! Seeded synthetic claim tables shaped like a cyber business-interruption
//! book: losses in 10³ EUR, durations in days, five service types and a
//! backup-plan block. Only used by tests; the numbers are not calibrated to
//! any published dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use std::fmt::Write as _;

/// Header written by [`to_csv`]; matches the default column map of the core loader.
pub const HEADER: &str = "loss,duration,service_type,backup_activated,backup_quality,backup_excess";

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureClaim {
    pub loss: f64,
    pub duration: f64,
    pub service_type: u8,
    pub backup_activated: bool,
    pub backup_quality: f64,
    pub backup_excess: f64,
}

const SERVICE_MULTIPLIER: [f64; 5] = [0.8, 0.9, 1.0, 1.15, 1.3];

/// Draws `n` claims deterministically from `seed`.
pub fn claims(n: usize, seed: u64) -> Vec<FixtureClaim> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_backup = Gamma::new(1.5, 2.13).unwrap();
    let t_none = Gamma::new(0.55, 2.4).unwrap();
    let noise = LogNormal::new(-0.125, 0.5).unwrap();
    (0..n)
        .map(|_| {
            let backup_activated = rng.random_bool(0.404);
            let service_type = rng.random_range(1..=5u8);
            let backup_quality = rng.random_range(0.05..0.95);
            let duration: f64 = if backup_activated {
                t_backup.sample(&mut rng)
            } else {
                t_none.sample(&mut rng)
            };
            let duration = (duration * 100.0).round().clamp(1.0, 1965.0) / 100.0;
            let (backup_excess, effective) = if backup_activated {
                let delay: f64 = rng.random_range(0.0..2.0);
                let excess = (duration - delay).max(0.0);
                (excess, duration - 0.8 * backup_quality * excess)
            } else {
                (0.0, duration + 1.5)
            };
            let mult = SERVICE_MULTIPLIER[usize::from(service_type - 1)];
            let eps = f64::min(noise.sample(&mut rng), 3.3);
            let loss = ((mult * (20.0 + 35.0 * effective) * eps) * 100.0).round().max(100.0) / 100.0;
            FixtureClaim {
                loss,
                duration,
                service_type,
                backup_activated,
                backup_quality,
                backup_excess,
            }
        })
        .collect()
}

/// Renders claims as comma-separated text with [`HEADER`].
pub fn to_csv(rows: &[FixtureClaim]) -> String {
    let mut out = String::with_capacity(rows.len() * 48);
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},t{},{},{},{}",
            r.loss,
            r.duration,
            r.service_type,
            u8::from(r.backup_activated),
            r.backup_quality,
            r.backup_excess
        );
    }
    out
}

/// Claims whose loss is an exact deterministic function of the index
/// (zero conditional variance): `loss = 10 + 5 * duration`.
pub fn deterministic_claims(n: usize, seed: u64) -> Vec<FixtureClaim> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let duration = f64::from(1 + (i % 8) as u32);
            FixtureClaim {
                loss: 10.0 + 5.0 * duration,
                duration,
                service_type: 1 + (i % 5) as u8,
                backup_activated: i % 2 == 0,
                backup_quality: rng.random_range(0.1..0.9),
                backup_excess: 0.0,
            }
        })
        .collect()
}
